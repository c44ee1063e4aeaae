#include "pld/config.hpp"

#include <fstream>
#include <set>

#include "pld/errors.hpp"

namespace pld {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (model.vocab != 0) model.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (total_steps == 0) throw ConfigError("total_steps must be positive");
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must lie in (0, 1)");
  if (!(lr.peak > 0.0)) throw ConfigError("lr.peak must be positive");
  if (!(lr.warmup_ratio > 0.0 && lr.warmup_ratio < 1.0)) throw ConfigError("lr.warmup_ratio must lie in (0, 1)");
  if (!(lr.decay_rate > 0.0 && lr.decay_rate <= 1.0)) throw ConfigError("lr.decay_rate must lie in (0, 1]");
  if (!(lr.decay_step > 0.0)) throw ConfigError("lr.decay_step must be positive");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must lie in (0, 1)");
  }
  if (eval_batches == 0) throw ConfigError("eval_batches must be positive");
  if (eval_interval == 0) throw ConfigError("eval_interval must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("adam.beta1 and adam.beta2 must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("adam.eps must be positive");
  if (!(adam.weight_decay >= 0.0) || !(adam.clip_norm >= 0.0)) {
    throw ConfigError("adam.weight_decay and adam.clip_norm must be non-negative");
  }
  if (schedule.enabled) {
    if (!(schedule.theta_limit > 0.0 && schedule.theta_limit <= 1.0)) {
      throw ConfigError("schedule.theta_limit must lie in (0, 1]");
    }
    if (schedule.gamma && !(*schedule.gamma > 0.0)) throw ConfigError("schedule.gamma must be positive");
    if (model.variant != Variant::kST) {
      throw ConfigError("a drop schedule requires model.variant = st");
    }
  }
}

TrainConfig default_train_config() { return TrainConfig{}; }

json to_json(const ModelConfig& c) {
  return json{{"layers", c.layers},
              {"hidden", c.hidden},
              {"heads", c.heads},
              {"vocab", c.vocab},
              {"max_seq", c.max_seq},
              {"variant", std::string(variant_name(c.variant))},
              {"dropout", c.dropout},
              {"ln_eps", c.ln_eps},
              {"init_std", c.init_std},
              {"per_sublayer_gates", c.per_sublayer_gates}};
}

ModelConfig model_config_from_json(const json& j, const ModelConfig& base) {
  const std::string where = "model";
  reject_unknown(j, {"layers", "hidden", "heads", "vocab", "max_seq", "variant", "dropout", "ln_eps",
                     "init_std", "per_sublayer_gates"},
                 where);
  ModelConfig c = base;
  read(j, "layers", c.layers, where);
  read(j, "hidden", c.hidden, where);
  read(j, "heads", c.heads, where);
  read(j, "vocab", c.vocab, where);
  read(j, "max_seq", c.max_seq, where);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  read(j, "dropout", c.dropout, where);
  read(j, "ln_eps", c.ln_eps, where);
  read(j, "init_std", c.init_std, where);
  read(j, "per_sublayer_gates", c.per_sublayer_gates, where);
  return c;
}

json to_json(const TrainConfig& c) {
  json schedule = json::object();
  schedule["enabled"] = c.schedule.enabled;
  schedule["theta_limit"] = c.schedule.theta_limit;
  schedule["gamma"] = c.schedule.gamma ? json(*c.schedule.gamma) : json(nullptr);
  return json{{"model", to_json(c.model)},
              {"schedule", schedule},
              {"adam",
               {{"beta1", c.adam.beta1},
                {"beta2", c.adam.beta2},
                {"eps", c.adam.eps},
                {"weight_decay", c.adam.weight_decay},
                {"clip_norm", c.adam.clip_norm}}},
              {"lr",
               {{"peak", c.lr.peak},
                {"warmup_ratio", c.lr.warmup_ratio},
                {"decay_rate", c.lr.decay_rate},
                {"decay_step", c.lr.decay_step}}},
              {"batch_size", c.batch_size},
              {"total_steps", c.total_steps},
              {"seed", c.seed},
              {"mask_prob", c.mask_prob},
              {"corpus_path", c.corpus_path},
              {"validation_fraction", c.validation_fraction},
              {"eval_interval", c.eval_interval},
              {"eval_batches", c.eval_batches},
              {"checkpoint_interval", c.checkpoint_interval},
              {"log_interval", c.log_interval}};
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j, {"model", "schedule", "adam", "lr", "batch_size", "total_steps", "seed", "mask_prob",
                     "corpus_path", "validation_fraction", "eval_interval", "eval_batches",
                     "checkpoint_interval", "log_interval"},
                 "config");
  TrainConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    if (s.is_string()) {
      if (s.get<std::string>() != "none") throw ConfigError("schedule must be an object or \"none\"");
      c.schedule.enabled = false;
    } else {
      reject_unknown(s, {"enabled", "theta_limit", "gamma"}, "schedule");
      read(s, "enabled", c.schedule.enabled, "schedule");
      read(s, "theta_limit", c.schedule.theta_limit, "schedule");
      if (s.contains("gamma") && !s.at("gamma").is_null()) c.schedule.gamma = s.at("gamma").get<double>();
    }
  }
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    reject_unknown(a, {"beta1", "beta2", "eps", "weight_decay", "clip_norm"}, "adam");
    read(a, "beta1", c.adam.beta1, "adam");
    read(a, "beta2", c.adam.beta2, "adam");
    read(a, "eps", c.adam.eps, "adam");
    read(a, "weight_decay", c.adam.weight_decay, "adam");
    read(a, "clip_norm", c.adam.clip_norm, "adam");
  }
  if (j.contains("lr")) {
    const auto& l = j.at("lr");
    reject_unknown(l, {"peak", "warmup_ratio", "decay_rate", "decay_step"}, "lr");
    read(l, "peak", c.lr.peak, "lr");
    read(l, "warmup_ratio", c.lr.warmup_ratio, "lr");
    read(l, "decay_rate", c.lr.decay_rate, "lr");
    read(l, "decay_step", c.lr.decay_step, "lr");
  }
  read(j, "batch_size", c.batch_size, "config");
  read(j, "total_steps", c.total_steps, "config");
  read(j, "seed", c.seed, "config");
  read(j, "mask_prob", c.mask_prob, "config");
  read(j, "corpus_path", c.corpus_path, "config");
  read(j, "validation_fraction", c.validation_fraction, "config");
  read(j, "eval_interval", c.eval_interval, "config");
  read(j, "eval_batches", c.eval_batches, "config");
  read(j, "checkpoint_interval", c.checkpoint_interval, "config");
  read(j, "log_interval", c.log_interval, "config");
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  TrainConfig c = train_config_from_json(j);
  std::filesystem::path corpus(c.corpus_path);
  if (corpus.is_relative()) {
    c.corpus_path = (std::filesystem::absolute(path).parent_path() / corpus).lexically_normal().string();
  }
  return c;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace pld
