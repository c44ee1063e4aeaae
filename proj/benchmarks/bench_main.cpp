#include <benchmark/benchmark.h>

#include <random>

#include "pld/model.hpp"
#include "pld/schedule.hpp"
#include "pld/tape.hpp"

namespace {

using pld::Tape;
using pld::Tensor;

Tensor<float> random_tensor(pld::Shape shape, std::uint64_t seed, bool grad = false) {
  auto t = Tensor<float>::zeros(shape, grad);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor({n, n}, 1);
  const auto b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    Tape<float> tape(false);
    benchmark::DoNotOptimize(tape.matmul(a, b).data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Arg(1024);

pld::ModelConfig bench_model(pld::Variant v) {
  pld::ModelConfig c;
  c.layers = 6;
  c.hidden = 64;
  c.heads = 4;
  c.vocab = 47;
  c.max_seq = 64;
  c.variant = v;
  return c;
}

pld::TokenBatch bench_tokens(std::size_t batch, std::size_t seq, std::size_t vocab) {
  pld::TokenBatch t{{batch, seq}, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) t.ids.push_back(static_cast<std::int32_t>((i * 31) % vocab));
  return t;
}

void BM_BlockForwardBackward(benchmark::State& state) {
  auto cfg = bench_model(pld::Variant::kPreLN);
  cfg.layers = 1;
  const auto w = pld::ModelWeights<float>::initialize(cfg, 3);
  const pld::SequenceLayout layout{16, 64};
  const auto x = random_tensor({layout.rows(), cfg.hidden}, 4, true);
  const pld::BlockContext<float> ctx{layout, cfg.heads, 1e-5f, 0.1, {pld::Mode::kTrain, 1, 0}, 0};
  for (auto _ : state) {
    Tape<float> tape;
    auto y = pld::preln_block(tape, x, w.blocks[0], ctx);
    tape.backward(tape.sum(y));
    w.zero_grad();
  }
}
BENCHMARK(BM_BlockForwardBackward)->Unit(benchmark::kMillisecond);

// One forward/backward pass of the toy model. Arg 0 runs every block; arg 1
// samples gates from the steady state of the progressive schedule.
void BM_ModelStep(benchmark::State& state) {
  const bool drop = state.range(0) == 1;
  const auto cfg = bench_model(drop ? pld::Variant::kST : pld::Variant::kPreLN);
  const auto w = pld::ModelWeights<float>::initialize(cfg, 5);
  const auto tokens = bench_tokens(16, 64, cfg.vocab);
  pld::MaskedTargets targets;
  for (std::size_t i = 0; i < tokens.ids.size(); i += 7) {
    targets.positions.push_back(i);
    targets.labels.push_back(tokens.ids[i]);
  }
  const auto schedule = pld::DropSchedule::with_default_gamma(0.5, 5000, cfg.layers);
  std::uint64_t step = 5000;
  for (auto _ : state) {
    const auto gates = drop ? pld::sample_gates(schedule, step, 7) : pld::GateVector::all_on(cfg.layers);
    Tape<float> tape;
    auto logits = pld::forward_model(tape, w, tokens, gates, pld::ForwardOptions{pld::Mode::kTrain, 7, step});
    tape.backward(tape.cross_entropy(logits, targets));
    w.zero_grad();
    ++step;
  }
}
BENCHMARK(BM_ModelStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
