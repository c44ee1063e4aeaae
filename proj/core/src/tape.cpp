#include "pld/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "pld/errors.hpp"
#include "pld/philox.hpp"

namespace pld {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
Buffer<T>& grad_buffer(TensorNode<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(s));
  }
}

}  // namespace

template <typename T>
bool Tape<T>::wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!record_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T>
Tensor<T> Tape<T>::emit(Shape shape, Buffer<T> value, bool needs_grad, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = needs_grad;
  if (needs_grad) ops_.push_back(Op{node, std::move(fn)});
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> Tape<T>::matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose tb) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const bool bt = tb == Transpose::kYes;
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t kb = bt ? b.dim(1) : b.dim(0);
  const std::size_t n = bt ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) +
                         (bt ? " x transpose " : " x ") + shape_string(b.shape()));
  }
  Buffer<T> out(m * n);
  ConstMatMap<T> A(a.data().data(), m, k);
  MatMap<T> C(out.data(), m, n);
  if (bt) {
    C.noalias() = A * ConstMatMap<T>(b.data().data(), n, k).transpose();
  } else {
    C.noalias() = A * ConstMatMap<T>(b.data().data(), k, n);
  }
  auto an = a.shared_node();
  auto bn = b.shared_node();
  return emit({m, n}, std::move(out), wants_grad({&a, &b}), [an, bn, m, k, n, bt](const Node& o) {
    ConstMatMap<T> G(o.grad.data(), m, n);
    if (an->requires_grad) {
      MatMap<T> dA(grad_buffer(*an).data(), m, k);
      if (bt) {
        dA.noalias() += G * ConstMatMap<T>(bn->value.data(), n, k);
      } else {
        dA.noalias() += G * ConstMatMap<T>(bn->value.data(), k, n).transpose();
      }
    }
    if (bn->requires_grad) {
      ConstMatMap<T> A(an->value.data(), m, k);
      if (bt) {
        MatMap<T> dB(grad_buffer(*bn).data(), n, k);
        dB.noalias() += G.transpose() * A;
      } else {
        MatMap<T> dB(grad_buffer(*bn).data(), k, n);
        dB.noalias() += A.transpose() * G;
      }
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::batched_matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose tb) {
  require_rank(a.shape(), 3, "batched_matmul");
  require_rank(b.shape(), 3, "batched_matmul");
  const bool bt = tb == Transpose::kYes;
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t kb = bt ? b.dim(2) : b.dim(1);
  const std::size_t n = bt ? b.dim(1) : b.dim(2);
  if (b.dim(0) != g || k != kb) {
    throw DimensionError("batched_matmul: incompatible shapes " + shape_string(a.shape()) +
                         (bt ? " x transpose " : " x ") + shape_string(b.shape()));
  }
  Buffer<T> out(g * m * n);
  for (std::size_t i = 0; i < g; ++i) {
    ConstMatMap<T> A(a.data().data() + i * m * k, m, k);
    MatMap<T> C(out.data() + i * m * n, m, n);
    if (bt) {
      C.noalias() = A * ConstMatMap<T>(b.data().data() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * ConstMatMap<T>(b.data().data() + i * k * n, k, n);
    }
  }
  auto an = a.shared_node();
  auto bn = b.shared_node();
  return emit({g, m, n}, std::move(out), wants_grad({&a, &b}),
              [an, bn, g, m, k, n, bt](const Node& o) {
                for (std::size_t i = 0; i < g; ++i) {
                  ConstMatMap<T> G(o.grad.data() + i * m * n, m, n);
                  if (an->requires_grad) {
                    MatMap<T> dA(grad_buffer(*an).data() + i * m * k, m, k);
                    if (bt) {
                      dA.noalias() += G * ConstMatMap<T>(bn->value.data() + i * n * k, n, k);
                    } else {
                      dA.noalias() +=
                          G * ConstMatMap<T>(bn->value.data() + i * k * n, k, n).transpose();
                    }
                  }
                  if (bn->requires_grad) {
                    ConstMatMap<T> A(an->value.data() + i * m * k, m, k);
                    if (bt) {
                      MatMap<T> dB(grad_buffer(*bn).data() + i * n * k, n, k);
                      dB.noalias() += G.transpose() * A;
                    } else {
                      MatMap<T> dB(grad_buffer(*bn).data() + i * k * n, k, n);
                      dB.noalias() += A.transpose() * G;
                    }
                  }
                }
              });
}

template <typename T>
Tensor<T> Tape<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Buffer<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.shared_node();
  auto bn = b.shared_node();
  return emit(a.shape(), std::move(out), wants_grad({&a, &b}), [an, bn](const Node& o) {
    for (auto* node : {an.get(), bn.get()}) {
      if (!node->requires_grad) continue;
      auto& ga = grad_buffer(*node);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Buffer<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.shared_node();
  auto bn = b.shared_node();
  return emit(a.shape(), std::move(out), wants_grad({&a, &b}), [an, bn](const Node& o) {
    if (an->requires_grad) {
      auto& ga = grad_buffer(*an);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& gb = grad_buffer(*bn);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  auto an = a.shared_node();
  return emit(a.shape(), std::move(out), wants_grad({&a}), [an, factor](const Node& o) {
    auto& ga = grad_buffer(*an);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> Tape<T>::add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(bias.shape(), 1, "add_bias");
  const std::size_t d = bias.dim(0);
  if (x.shape().back() != d) {
    throw DimensionError("add_bias: last axis of " + shape_string(x.shape()) +
                         " does not match bias " + shape_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Buffer<T> out(x.numel());
  auto xv = x.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + bv[j];
  auto xn = x.shared_node();
  auto bn = bias.shared_node();
  return emit(x.shape(), std::move(out), wants_grad({&x, &bias}), [xn, bn, rows, d](const Node& o) {
    if (xn->requires_grad) {
      auto& gx = grad_buffer(*xn);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& gb = grad_buffer(*bn);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += o.grad[r * d + j];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  auto an = a.shared_node();
  return emit({1}, {static_cast<T>(acc)}, wants_grad({&a}), [an](const Node& o) {
    auto& ga = grad_buffer(*an);
    const T g = o.grad[0];
    for (auto& v : ga) v += g;
  });
}

template <typename T>
Tensor<T> Tape<T>::mean(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  const std::size_t n = a.numel();
  auto an = a.shared_node();
  return emit({1}, {static_cast<T>(acc / static_cast<double>(n))}, wants_grad({&a}),
              [an, n](const Node& o) {
                auto& ga = grad_buffer(*an);
                const T g = o.grad[0] / static_cast<T>(n);
                for (auto& v : ga) v += g;
              });
}

template <typename T>
Tensor<T> Tape<T>::layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                              T eps) {
  require_rank(gain.shape(), 1, "layer_norm");
  require_same_shape(gain.shape(), bias.shape(), "layer_norm");
  const std::size_t d = gain.dim(0);
  if (x.shape().back() != d) {
    throw DimensionError("layer_norm: last axis of " + shape_string(x.shape()) +
                         " does not match gain " + shape_string(gain.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Buffer<T> out(x.numel());
  Buffer<T> xhat(x.numel());
  Buffer<T> rstd(rows);
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
    rstd[r] = static_cast<T>(rs);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = static_cast<T>((row[j] - mu) * rs);
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto xn = x.shared_node();
  auto gn = gain.shared_node();
  auto bn = bias.shared_node();
  return emit(x.shape(), std::move(out), wants_grad({&x, &gain, &bias}),
              [xn, gn, bn, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](const Node& o) {
                const auto& g = o.grad;
                if (gn->requires_grad) {
                  auto& gg = grad_buffer(*gn);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
                }
                if (bn->requires_grad) {
                  auto& gb = grad_buffer(*bn);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                }
                if (!xn->requires_grad) return;
                auto& gx = grad_buffer(*xn);
                const auto& gain_v = gn->value;
                std::vector<double> dxhat(d);
                for (std::size_t r = 0; r < rows; ++r) {
                  double mean_d = 0.0, mean_dx = 0.0;
                  for (std::size_t j = 0; j < d; ++j) {
                    dxhat[j] = static_cast<double>(g[r * d + j]) * gain_v[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * xhat[r * d + j];
                  }
                  mean_d /= static_cast<double>(d);
                  mean_dx /= static_cast<double>(d);
                  const double rs = rstd[r];
                  for (std::size_t j = 0; j < d; ++j) {
                    gx[r * d + j] +=
                        static_cast<T>(rs * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx));
                  }
                }
              });
}

template <typename T>
Tensor<T> Tape<T>::softmax(const Tensor<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Buffer<T> out(x.numel());
  auto xv = x.data();
  if (inner == 1) {
    for (std::size_t o = 0; o < outer; ++o) {
      ConstArrMap<T> row(xv.data() + o * n, n);
      ArrMap<T>(out.data() + o * n, n) = row - row.maxCoeff();
    }
    ArrMap<T> all(out.data(), out.size());
    all = all.exp();
    for (std::size_t o = 0; o < outer; ++o) {
      ArrMap<T> row(out.data() + o * n, n);
      row *= T(1) / row.sum();
    }
  }
  for (std::size_t o = 0; o < outer && inner > 1; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
    }
  }
  auto xn = x.shared_node();
  return emit(s, std::move(out), wants_grad({&x}), [xn, outer, inner, n](const Node& o) {
    auto& gx = grad_buffer(*xn);
    const auto& y = o.value;
    const auto& g = o.grad;
    if (inner == 1) {
      for (std::size_t a = 0; a < outer; ++a) {
        ConstArrMap<T> yr(y.data() + a * n, n);
        ConstArrMap<T> gr(g.data() + a * n, n);
        const T dot = (gr * yr).sum();
        ArrMap<T>(gx.data() + a * n, n) += yr * (gr - dot);
      }
      return;
    }
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = a * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::gelu(const Tensor<T>& x) {
  const T c = static_cast<T>(kGeluSqrt2OverPi);
  const T k = static_cast<T>(kGeluCubic);
  const std::size_t count = x.numel();
  Buffer<T> out(count);
  Buffer<T> th(count);
  ConstArrMap<T> xa(x.data().data(), count);
  ArrMap<T> ta(th.data(), count);
  ta = (c * (xa + k * xa.cube())).tanh();
  ArrMap<T>(out.data(), count) = T(0.5) * xa * (T(1) + ta);
  auto xn = x.shared_node();
  return emit(x.shape(), std::move(out), wants_grad({&x}), [xn, c, k, th = std::move(th)](const Node& o) {
    auto& gx = grad_buffer(*xn);
    const std::size_t count = gx.size();
    ConstArrMap<T> v(xn->value.data(), count);
    ConstArrMap<T> t(th.data(), count);
    ConstArrMap<T> g(o.grad.data(), count);
    const auto dt = c * (T(1) + T(3) * k * v.square()) * (T(1) - t.square());
    ArrMap<T>(gx.data(), count) += g * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
  });
}

template <typename T>
Tensor<T> Tape<T>::dropout(const Tensor<T>& x, double rate, DropoutKey key) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const Philox rng(key.seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  // u32_to_unit(u) >= rate  <=>  u >= ceil(rate * 2^32)
  const std::uint64_t threshold = static_cast<std::uint64_t>(std::ceil(std::ldexp(rate, 32)));
  const std::size_t count = x.numel();
  Buffer<T> multiplier(count);
  for (std::size_t i = 0; i < count; i += 4) {
    const auto block = rng.block(key.stream, i / 4);
    const std::size_t lanes = std::min<std::size_t>(4, count - i);
    for (std::size_t lane = 0; lane < lanes; ++lane) {
      multiplier[i + lane] = block[lane] >= threshold ? keep_scale : T(0);
    }
  }
  Buffer<T> out(count);
  ArrMap<T>(out.data(), count) = ConstArrMap<T>(x.data().data(), count) * ConstArrMap<T>(multiplier.data(), count);
  auto xn = x.shared_node();
  return emit(x.shape(), std::move(out), wants_grad({&x}),
              [xn, multiplier = std::move(multiplier)](const Node& o) {
                auto& gx = grad_buffer(*xn);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * multiplier[i];
              });
}

template <typename T>
Tensor<T> Tape<T>::embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_rank(table.shape(), 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  for (std::int32_t id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw BoundsError("embedding: id " + std::to_string(id) + " outside table of " +
                        std::to_string(vocab) + " rows");
    }
  }
  Buffer<T> out(idx.size() * d);
  auto tv = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(tv.data() + static_cast<std::size_t>(idx[r]) * d, d, out.data() + r * d);
  }
  auto tn = table.shared_node();
  const std::size_t rows = idx.size();
  return emit({rows, d}, std::move(out), wants_grad({&table}),
              [tn, d, idx = std::move(idx)](const Node& o) {
                auto& gt = grad_buffer(*tn);
                for (std::size_t r = 0; r < idx.size(); ++r) {
                  T* dst = gt.data() + static_cast<std::size_t>(idx[r]) * d;
                  const T* src = o.grad.data() + r * d;
                  for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                }
              });
}

template <typename T>
Tensor<T> Tape<T>::split_heads(const Tensor<T>& x, std::size_t batch, std::size_t seq,
                               std::size_t heads) {
  require_rank(x.shape(), 2, "split_heads");
  if (heads == 0 || x.dim(0) != batch * seq || x.dim(1) % heads != 0) {
    throw DimensionError("split_heads: " + shape_string(x.shape()) + " is not [" +
                         std::to_string(batch * seq) + " x multiple of " + std::to_string(heads) +
                         "]");
  }
  const std::size_t dh = x.dim(1) / heads;
  const std::size_t width = x.dim(1);
  Buffer<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t s = 0; s < seq; ++s)
        std::copy_n(xv.data() + (b * seq + s) * width + h * dh, dh,
                    out.data() + ((b * heads + h) * seq + s) * dh);
  auto xn = x.shared_node();
  return emit({batch * heads, seq, dh}, std::move(out), wants_grad({&x}),
              [xn, batch, seq, heads, dh, width](const Node& o) {
                auto& gx = grad_buffer(*xn);
                for (std::size_t b = 0; b < batch; ++b)
                  for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t s = 0; s < seq; ++s) {
                      T* dst = gx.data() + (b * seq + s) * width + h * dh;
                      const T* src = o.grad.data() + ((b * heads + h) * seq + s) * dh;
                      for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                    }
              });
}

template <typename T>
Tensor<T> Tape<T>::merge_heads(const Tensor<T>& x, std::size_t batch, std::size_t seq,
                               std::size_t heads) {
  require_rank(x.shape(), 3, "merge_heads");
  if (x.dim(0) != batch * heads || x.dim(1) != seq) {
    throw DimensionError("merge_heads: " + shape_string(x.shape()) + " is not [" +
                         std::to_string(batch * heads) + " x " + std::to_string(seq) + " x dh]");
  }
  const std::size_t dh = x.dim(2);
  const std::size_t width = dh * heads;
  Buffer<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t s = 0; s < seq; ++s)
        std::copy_n(xv.data() + ((b * heads + h) * seq + s) * dh, dh,
                    out.data() + (b * seq + s) * width + h * dh);
  auto xn = x.shared_node();
  return emit({batch * seq, width}, std::move(out), wants_grad({&x}),
              [xn, batch, seq, heads, dh, width](const Node& o) {
                auto& gx = grad_buffer(*xn);
                for (std::size_t b = 0; b < batch; ++b)
                  for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t s = 0; s < seq; ++s) {
                      T* dst = gx.data() + ((b * heads + h) * seq + s) * dh;
                      const T* src = o.grad.data() + (b * seq + s) * width + h * dh;
                      for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                    }
              });
}

template <typename T>
Tensor<T> Tape<T>::cross_entropy(const Tensor<T>& logits, const MaskedTargets& targets) {
  require_rank(logits.shape(), 2, "cross_entropy");
  if (targets.positions.size() != targets.labels.size()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.positions.size()) +
                         " positions but " + std::to_string(targets.labels.size()) + " labels");
  }
  if (targets.positions.empty()) throw ContractError("cross_entropy: no masked tokens");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  for (std::size_t i = 0; i < targets.positions.size(); ++i) {
    if (targets.positions[i] >= rows) {
      throw BoundsError("cross_entropy: position " + std::to_string(targets.positions[i]) +
                        " outside " + std::to_string(rows) + " rows");
    }
    const std::int32_t label = targets.labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= vocab) {
      throw BoundsError("cross_entropy: label " + std::to_string(label) + " outside vocabulary of " +
                        std::to_string(vocab));
    }
  }
  auto lv = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < targets.positions.size(); ++i) {
    const T* row = lv.data() + targets.positions[i] * vocab;
    const T mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[targets.labels[i]]);
  }
  const std::size_t count = targets.positions.size();
  auto ln = logits.shared_node();
  return emit({1}, {static_cast<T>(total / static_cast<double>(count))}, wants_grad({&logits}),
              [ln, targets, vocab, count](const Node& o) {
                auto& gl = grad_buffer(*ln);
                const double g = static_cast<double>(o.grad[0]) / static_cast<double>(count);
                std::vector<double> p(vocab);
                for (std::size_t i = 0; i < count; ++i) {
                  const std::size_t r = targets.positions[i];
                  const T* row = ln->value.data() + r * vocab;
                  const T mx = *std::max_element(row, row + vocab);
                  double z = 0.0;
                  for (std::size_t j = 0; j < vocab; ++j) {
                    p[j] = std::exp(static_cast<double>(row[j] - mx));
                    z += p[j];
                  }
                  T* dst = gl.data() + r * vocab;
                  for (std::size_t j = 0; j < vocab; ++j) dst[j] += static_cast<T>(g * p[j] / z);
                  dst[targets.labels[i]] -= static_cast<T>(g);
                }
              });
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any tensor that requires a gradient");
  }
  grad_buffer(*loss.node())[0] = T(1);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(*it->output);
  }
  ops_.clear();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace pld
