#include "stgrat/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>

#include "text_util.hpp"

namespace stgrat {

void KeyValues::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries.emplace_back(key, value);
}

const std::string* KeyValues::get(const std::string& key) const {
  for (const auto& [k, v] : entries) {
    if (k == key) return &v;
  }
  return nullptr;
}

KeyValues parse_key_values(const std::string& text, const std::string& source) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string_view body = text::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("", source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(text::trim(body.substr(0, eq)));
    if (key.empty()) throw ConfigError("", source + ":" + std::to_string(line_no) + ": empty key");
    kv.set(key, std::string(text::trim(body.substr(eq + 1))));
  }
  return kv;
}

KeyValues load_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_key_values(buf.str(), path);
}

namespace {

using Setter = std::function<void(RunConfig&, const std::string&)>;

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError(key, "config key '" + key + "': invalid value '" + value + "' (expected " + expected + ")");
}

long long as_int(const std::string& key, const std::string& v) {
  auto x = text::parse_int(v);
  if (!x) bad_value(key, v, "an integer");
  return *x;
}

Real as_real(const std::string& key, const std::string& v) {
  auto x = text::parse_real(v);
  if (!x) bad_value(key, v, "a number");
  return *x;
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto int_key = [&t](const std::string& k, auto field) {
      t[k] = [k, field](RunConfig& c, const std::string& v) { field(c) = static_cast<std::remove_reference_t<decltype(field(c))>>(as_int(k, v)); };
    };
    auto real_key = [&t](const std::string& k, auto field) {
      t[k] = [k, field](RunConfig& c, const std::string& v) { field(c) = as_real(k, v); };
    };
    auto bool_key = [&t](const std::string& k, auto field) {
      t[k] = [k, field](RunConfig& c, const std::string& v) { field(c) = as_bool(k, v); };
    };
    auto string_key = [&t](const std::string& k, auto field) {
      t[k] = [field](RunConfig& c, const std::string& v) { field(c) = v; };
    };

    int_key("layers", [](RunConfig& c) -> int& { return c.model.layers; });
    int_key("d_model", [](RunConfig& c) -> Index& { return c.model.d_model; });
    int_key("heads", [](RunConfig& c) -> int& { return c.model.heads; });
    int_key("K", [](RunConfig& c) -> int& { return c.model.K; });
    int_key("range", [](RunConfig& c) -> int& { return c.model.range; });
    int_key("input_steps", [](RunConfig& c) -> Index& { return c.model.input_steps; });
    int_key("output_steps", [](RunConfig& c) -> Index& { return c.model.output_steps; });
    real_key("dropout", [](RunConfig& c) -> Real& { return c.model.dropout; });
    int_key("embedding_dim", [](RunConfig& c) -> Index& { return c.model.embedding_dim; });
    int_key("ffn_dim", [](RunConfig& c) -> Index& { return c.model.ffn_dim; });
    bool_key("directed_heads", [](RunConfig& c) -> bool& { return c.model.directed_heads; });
    bool_key("use_prior", [](RunConfig& c) -> bool& { return c.model.use_prior; });
    bool_key("use_sentinel", [](RunConfig& c) -> bool& { return c.model.use_sentinel; });
    t["sentinel_form"] = [](RunConfig& c, const std::string& v) {
      if (v == "exponential") c.model.sentinel_form = SentinelForm::exponential;
      else if (v == "literal") c.model.sentinel_form = SentinelForm::literal;
      else bad_value("sentinel_form", v, "exponential or literal");
    };

    int_key("batch_size", [](RunConfig& c) -> Index& { return c.train.batch_size; });
    int_key("warmup_steps", [](RunConfig& c) -> std::int64_t& { return c.train.warmup_steps; });
    real_key("kappa", [](RunConfig& c) -> Real& { return c.train.kappa; });
    int_key("max_epochs", [](RunConfig& c) -> int& { return c.train.max_epochs; });
    t["seed"] = [](RunConfig& c, const std::string& v) {
      const long long s = as_int("seed", v);
      if (s < 0) bad_value("seed", v, "a non-negative integer");
      c.train.seed = static_cast<std::uint64_t>(s);
    };
    real_key("prior_lo", [](RunConfig& c) -> Real& { return c.train.prior_lo; });
    real_key("prior_hi", [](RunConfig& c) -> Real& { return c.train.prior_hi; });
    int_key("patience", [](RunConfig& c) -> int& { return c.train.patience; });
    real_key("lr_scale", [](RunConfig& c) -> Real& { return c.train.lr_scale; });
    real_key("clip_norm", [](RunConfig& c) -> Real& { return c.train.clip_norm; });
    int_key("chunk_size", [](RunConfig& c) -> Index& { return c.train.chunk_size; });
    int_key("threads", [](RunConfig& c) -> int& { return c.train.threads; });
    int_key("eval_batch_size", [](RunConfig& c) -> Index& { return c.train.eval_batch_size; });
    t["epsilon"] = [](RunConfig& c, const std::string& v) {
      if (v == "schedule") c.train.forced_epsilon.reset();
      else c.train.forced_epsilon = as_real("epsilon", v);
    };

    string_key("speeds", [](RunConfig& c) -> std::string& { return c.data.speeds; });
    string_key("graph", [](RunConfig& c) -> std::string& { return c.data.graph; });
    string_key("embeddings", [](RunConfig& c) -> std::string& { return c.data.embeddings; });
    string_key("output_dir", [](RunConfig& c) -> std::string& { return c.output_dir; });
    real_key("train_fraction", [](RunConfig& c) -> Real& { return c.data.train_fraction; });
    real_key("validation_fraction", [](RunConfig& c) -> Real& { return c.data.validation_fraction; });
    real_key("test_fraction", [](RunConfig& c) -> Real& { return c.data.test_fraction; });
    t["normalization"] = [](RunConfig& c, const std::string& v) {
      if (v == "zscore") c.data.normalization = NormalizationMethod::zscore;
      else if (v == "minmax") c.data.normalization = NormalizationMethod::minmax;
      else bad_value("normalization", v, "zscore or minmax");
    };
    t["edge_weighting"] = [](RunConfig& c, const std::string& v) {
      if (v == "gaussian") c.data.weighting = EdgeWeighting::gaussian_kernel;
      else if (v == "raw") c.data.weighting = EdgeWeighting::raw;
      else if (v == "var") c.data.weighting = EdgeWeighting::var_augmented;
      else bad_value("edge_weighting", v, "gaussian, raw or var");
    };
    real_key("sigma", [](RunConfig& c) -> Real& { return c.data.sigma; });
    real_key("cutoff", [](RunConfig& c) -> Real& { return c.data.cutoff; });
    int_key("var_lag", [](RunConfig& c) -> int& { return c.data.var_lag; });
    int_key("line_epochs", [](RunConfig& c) -> int& { return c.data.line.epochs; });
    int_key("line_negative_samples", [](RunConfig& c) -> int& { return c.data.line.negative_samples; });
    real_key("line_rate", [](RunConfig& c) -> Real& { return c.data.line.initial_rate; });
    return t;
  }();
  return table;
}

}  // namespace

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, _] : setters()) k.push_back(name);
    return k;
  }();
  return keys;
}

void apply_key_values(RunConfig& config, const KeyValues& values) {
  const auto& table = setters();
  for (const auto& [key, value] : values.entries) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError(key, "unknown config key '" + key + "'");
    it->second(config, value);
  }
  config.data.line.dim = config.model.embedding_dim;
}

std::string canonical_model_config(const ModelConfig& c) {
  std::map<std::string, std::string> kv{
      {"layers", std::to_string(c.layers)},
      {"d_model", std::to_string(c.d_model)},
      {"heads", std::to_string(c.heads)},
      {"K", std::to_string(c.K)},
      {"range", std::to_string(c.range)},
      {"input_steps", std::to_string(c.input_steps)},
      {"output_steps", std::to_string(c.output_steps)},
      {"dropout", text::format_real(c.dropout)},
      {"embedding_dim", std::to_string(c.embedding_dim)},
      {"ffn_dim", std::to_string(c.ffn_dim)},
      {"directed_heads", c.directed_heads ? "true" : "false"},
      {"use_prior", c.use_prior ? "true" : "false"},
      {"use_sentinel", c.use_sentinel ? "true" : "false"},
      {"sentinel_form", c.sentinel_form == SentinelForm::literal ? "literal" : "exponential"},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

ModelConfig parse_model_config(const std::string& text) {
  RunConfig rc;
  apply_key_values(rc, parse_key_values(text, "model config"));
  return rc.model;
}

}  // namespace stgrat
