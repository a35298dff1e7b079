#include "stgrat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "stgrat/config.hpp"

namespace stgrat {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'G', 'R', 'A', 'T', '1', '\0'};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_ += s;
  }
  void raw(const std::string& s) { buf_ += s; }
  void matrix(const Matrix& m) {
    for (Index i = 0; i < m.size(); ++i) f64(m.data()[i]);
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string_view data, std::string source) : data_(data), source_(std::move(source)) {}

  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError(source_ + ": truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  Matrix matrix(Index rows, Index cols) {
    need(static_cast<std::size_t>(rows * cols) * 8);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = f64();
    return m;
  }
  bool done() const { return pos_ == data_.size(); }
  const std::string& source() const { return source_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string source_;
};

void section(Writer& out, const char* tag, Writer& body) {
  out.raw(std::string(tag, 4));
  out.str(body.bytes());
}

std::string manifest(const ParameterSet& params) {
  std::string m;
  for (const auto& p : params.items()) {
    m += p.name + " " + std::to_string(p.value.rows()) + " " + std::to_string(p.value.cols()) + "\n";
  }
  return m;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  const auto& items = c.state.params.store.items();
  Writer out;
  out.raw(std::string(kMagic, 8));
  out.u32(kCheckpointVersion);

  Writer conf;
  conf.raw(canonical_model_config(c.model));
  section(out, "CONF", conf);

  Writer mani;
  mani.raw(manifest(c.state.params.store));
  section(out, "MANI", mani);

  Writer parm;
  for (const auto& p : items) parm.matrix(p.value);
  section(out, "PARM", parm);

  Writer optm;
  const OptimizerState& o = c.state.optimizer;
  optm.i64(o.step);
  optm.i64(o.warmup_steps);
  optm.i64(o.d_model);
  optm.f64(o.settings.beta1);
  optm.f64(o.settings.beta2);
  optm.f64(o.settings.eps);
  const bool moments = !o.first_moment.empty();
  optm.u8(moments ? 1 : 0);
  if (moments) {
    if (o.first_moment.size() != items.size() || o.second_moment.size() != items.size()) {
      throw CheckpointError("optimizer moments do not match the parameter list");
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
      optm.matrix(o.first_moment[i]);
      optm.matrix(o.second_moment[i]);
    }
  }
  section(out, "OPTM", optm);

  Writer norm;
  norm.u8(c.stats.method == NormalizationMethod::minmax ? 1 : 0);
  norm.f64(c.stats.mean);
  norm.f64(c.stats.std);
  norm.f64(c.stats.min);
  norm.f64(c.stats.max);
  section(out, "NORM", norm);

  Writer iter;
  iter.i64(c.state.iteration);
  iter.i64(c.state.epoch);
  iter.u64(c.seed);
  iter.i64(c.step_seconds);
  section(out, "ITER", iter);

  Writer grph;
  grph.u64(static_cast<std::uint64_t>(c.graph.node_count()));
  for (const auto& id : c.graph.node_ids()) grph.str(id);
  grph.matrix(c.graph.adjacency());
  section(out, "GRPH", grph);

  Writer embd;
  embd.u64(static_cast<std::uint64_t>(c.embeddings.dim));
  embd.u64(static_cast<std::uint64_t>(c.embeddings.vectors.rows()));
  embd.matrix(c.embeddings.vectors);
  section(out, "EMBD", embd);

  const std::uint64_t sum = fnv1a(out.bytes());
  out.u64(sum);
  return std::move(out.bytes());
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 8 + 4 + 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kMagic, 8) == 0) throw CheckpointError(source + ": truncated file");
    throw CheckpointError(source + ": not a checkpoint file (bad magic)");
  }
  Reader head(std::string_view(bytes).substr(8, 4), source);
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(source + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::string_view body(bytes.data(), bytes.size() - 8);
  Reader tail(std::string_view(bytes).substr(bytes.size() - 8), source);
  if (fnv1a(body) != tail.u64()) throw CheckpointError(source + ": corrupt or truncated file (checksum mismatch)");

  Reader in(body.substr(12), source);
  auto take = [&](const char* tag) {
    in.need(4);
    std::string got;
    for (int i = 0; i < 4; ++i) got.push_back(static_cast<char>(in.u8()));
    if (got != std::string(tag, 4)) {
      throw CheckpointError(source + ": corrupt file (expected section " + std::string(tag, 4) + ")");
    }
    return in.str();
  };

  Checkpoint c;
  const std::string conf = take("CONF");
  const std::string mani = take("MANI");
  const std::string parm = take("PARM");
  const std::string optm = take("OPTM");
  const std::string norm = take("NORM");
  const std::string iter = take("ITER");
  const std::string grph = take("GRPH");
  const std::string embd = take("EMBD");
  if (!in.done()) throw CheckpointError(source + ": corrupt file (trailing bytes)");

  try {
    c.model = parse_model_config(conf);
    c.model.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(source + ": invalid model configuration: " + e.what());
  }
  Rng dummy(0);
  c.state.params = ModelParams::create(c.model, dummy);
  auto& items = c.state.params.store.items();
  if (manifest(c.state.params.store) != mani) {
    throw CheckpointError(source + ": parameter manifest does not match the model configuration");
  }
  Reader pr(parm, source);
  for (auto& p : items) p.value = pr.matrix(p.value.rows(), p.value.cols());
  if (!pr.done()) throw CheckpointError(source + ": parameter count mismatch");

  Reader orr(optm, source);
  OptimizerState& o = c.state.optimizer;
  o.step = orr.i64();
  o.warmup_steps = orr.i64();
  o.d_model = orr.i64();
  o.settings.beta1 = orr.f64();
  o.settings.beta2 = orr.f64();
  o.settings.eps = orr.f64();
  if (orr.u8() != 0) {
    for (const auto& p : items) {
      o.first_moment.push_back(orr.matrix(p.value.rows(), p.value.cols()));
      o.second_moment.push_back(orr.matrix(p.value.rows(), p.value.cols()));
    }
  }
  if (!orr.done()) throw CheckpointError(source + ": optimizer state size mismatch");

  Reader nr(norm, source);
  c.stats.method = nr.u8() != 0 ? NormalizationMethod::minmax : NormalizationMethod::zscore;
  c.stats.mean = nr.f64();
  c.stats.std = nr.f64();
  c.stats.min = nr.f64();
  c.stats.max = nr.f64();

  Reader ir(iter, source);
  c.state.iteration = ir.i64();
  c.state.epoch = static_cast<int>(ir.i64());
  c.seed = ir.u64();
  c.step_seconds = ir.i64();

  Reader gr(grph, source);
  const auto n = static_cast<Index>(gr.u64());
  std::vector<std::string> ids;
  for (Index i = 0; i < n; ++i) ids.push_back(gr.str());
  Matrix adj = gr.matrix(n, n);
  if (!gr.done()) throw CheckpointError(source + ": graph section size mismatch");
  try {
    c.graph = RoadGraph(ids, std::move(adj));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(source + ": invalid graph: " + e.what());
  }

  Reader er(embd, source);
  c.embeddings.dim = static_cast<Index>(er.u64());
  const auto rows = static_cast<Index>(er.u64());
  c.embeddings.vectors = er.matrix(rows, c.embeddings.dim);
  c.embeddings.node_ids = rows > 0 ? ids : std::vector<std::string>{};
  if (!er.done()) throw CheckpointError(source + ": embedding section size mismatch");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str(), path);
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
  Checkpoint c = load_checkpoint(path);
  if (!(c.model == expected)) {
    throw CheckpointError(path + ": model configuration mismatch (checkpoint has\n" + canonical_model_config(c.model) +
                          "expected\n" + canonical_model_config(expected) + ")");
  }
  return c;
}

}  // namespace stgrat
