#include "elab/store.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "elab/error.hpp"

namespace elab {

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t len) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> xs) {
    for (double x : xs) f64(x);
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  template <typename T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

  std::uint8_t u8() { return need(1), p_[pos_++]; }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  void f64s(std::span<double> xs) {
    need(xs.size() * 8);
    for (double& x : xs) x = f64();
  }
  std::string line() {
    const auto* start = p_ + pos_;
    const auto* nl = static_cast<const std::uint8_t*>(std::memchr(start, '\n', n_ - pos_));
    if (!nl) throw CorruptionError("missing header line terminator");
    std::string s(reinterpret_cast<const char*>(start), static_cast<std::size_t>(nl - start));
    pos_ += s.size() + 1;
    return s;
  }
  std::size_t remaining() const { return n_ - pos_; }
  void finish() const {
    if (pos_ != n_) throw CorruptionError("trailing bytes after payload");
  }

 private:
  void need(std::size_t k) const {
    if (n_ - pos_ < k) throw CorruptionError("payload truncated");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> wrap(ArtifactKind kind, const std::vector<std::uint8_t>& payload) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(kind));
  w.u32(0);
  w.u64(payload.size());
  w.u64(fnv1a64(payload.data(), payload.size()));
  auto out = w.take();
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Reader open_payload(const std::vector<std::uint8_t>& bytes, ArtifactKind expected) {
  const ArtifactHeader h = read_header(bytes);
  if (h.kind != expected)
    throw InvalidArgument("artifact kind " + std::to_string(static_cast<std::uint32_t>(h.kind)) + ", expected " +
                          std::to_string(static_cast<std::uint32_t>(expected)));
  return Reader(bytes.data() + kHeaderSize, bytes.size() - kHeaderSize);
}

void write_config(Writer& w, const ModelConfig& c) {
  w.u64(c.vocab_size);
  w.u64(c.embed_dim);
  w.u64(c.num_layers);
  w.u64(c.num_heads);
  w.u64(c.mlp_hidden);
  w.u64(c.max_positions);
  w.f64(c.layernorm_epsilon);
  w.u64(c.seed);
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  c.vocab_size = r.u64();
  c.embed_dim = r.u64();
  c.num_layers = r.u64();
  c.num_heads = r.u64();
  c.mlp_hidden = r.u64();
  c.max_positions = r.u64();
  c.layernorm_epsilon = r.f64();
  c.seed = r.u64();
  return c;
}

std::string fmt_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// Parses "k1=v1 k2=v2 ..." into (key, value) pairs.
std::vector<std::pair<std::string, std::string>> parse_kv_line(const std::string& line) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw CorruptionError("malformed target header field '" + tok + "'");
    out.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
  }
  return out;
}

}  // namespace

ArtifactHeader read_header(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderSize) throw CorruptionError("file shorter than the container header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CorruptionError("bad magic, not an ELAB container");
  Reader r(bytes.data() + 4, kHeaderSize - 4);
  ArtifactHeader h;
  h.format_version = r.u32();
  if (h.format_version != kFormatVersion)
    throw UnsupportedVersion("format version " + std::to_string(h.format_version) + " not supported (expected " +
                             std::to_string(kFormatVersion) + ")");
  const std::uint32_t kind = r.u32();
  if (kind > static_cast<std::uint32_t>(ArtifactKind::plan)) throw CorruptionError("unknown artifact kind");
  h.kind = static_cast<ArtifactKind>(kind);
  if (r.u32() != 0) throw CorruptionError("reserved header field is not zero");
  h.payload_length = r.u64();
  h.payload_checksum = r.u64();
  if (h.payload_length != bytes.size() - kHeaderSize) throw CorruptionError("payload length mismatch (truncated file?)");
  if (fnv1a64(bytes.data() + kHeaderSize, bytes.size() - kHeaderSize) != h.payload_checksum)
    throw CorruptionError("payload checksum mismatch");
  return h;
}

std::vector<std::uint8_t> encode_model(const ModelBundle& model) {
  Writer w;
  write_config(w, model.config);
  for_each_tensor(model, [&](std::span<const double> t) { w.f64s(t); });
  return wrap(ArtifactKind::model, w.take());
}

ModelBundle decode_model(const std::vector<std::uint8_t>& bytes) {
  Reader r = open_payload(bytes, ArtifactKind::model);
  const ModelConfig config = read_config(r);
  try {
    config.validate();
  } catch (const InvalidArgument& e) {
    throw CorruptionError(std::string("stored model config invalid: ") + e.what());
  }
  // Bound the allocation by what the file can actually hold.
  const auto d = config.embed_dim, v = config.vocab_size, p = config.max_positions, hdn = config.mlp_hidden;
  const double expected = 8.0 * (static_cast<double>(v) * d * 2 + static_cast<double>(p) * d + 2.0 * d +
                                 static_cast<double>(config.num_layers) * (4.0 * d + 3.0 * d * d + 3.0 * d + d * d + d +
                                                                           2.0 * d * hdn + hdn + d));
  if (expected != static_cast<double>(r.remaining())) throw CorruptionError("tensor data size does not match config");
  ModelBundle m = allocate_model(config);
  for_each_tensor(m, [&](std::span<double> t) { r.f64s(t); });
  r.finish();
  return m;
}

std::vector<std::uint8_t> encode_target(const TargetArtifact& t) {
  Writer w;
  std::string head = "vocab_size=" + std::to_string(t.distribution.size()) + " kind=" + std::string(to_string(t.kind)) +
                     " target_entropy_bits=" + fmt_real(t.target_entropy_bits) + " seed=" + std::to_string(t.seed) +
                     " entropy_bits=" + fmt_real(t.distribution.entropy_bits()) +
                     " mass_bound=" + fmt_real(t.mass_bound) + " converged=" + (t.converged ? "1" : "0") + " outliers=";
  for (std::size_t i = 0; i < t.outlier_tokens.size(); ++i) head += (i ? "," : "") + std::to_string(t.outlier_tokens[i]);
  if (t.outlier_tokens.empty()) head += "-";
  head += '\n';
  w.bytes(head.data(), head.size());
  w.f64s(t.distribution.probs());
  return wrap(ArtifactKind::target, w.take());
}

TargetArtifact decode_target(const std::vector<std::uint8_t>& bytes) {
  Reader r = open_payload(bytes, ArtifactKind::target);
  TargetArtifact t;
  std::uint64_t n = 0;
  double stored_entropy = NAN;
  try {
    for (const auto& [k, v] : parse_kv_line(r.line())) {
      if (k == "vocab_size")
        n = std::stoull(v);
      else if (k == "kind")
        t.kind = parse_target_kind(v);
      else if (k == "target_entropy_bits")
        t.target_entropy_bits = std::stod(v);
      else if (k == "seed")
        t.seed = std::stoull(v);
      else if (k == "entropy_bits")
        stored_entropy = std::stod(v);
      else if (k == "mass_bound")
        t.mass_bound = std::stod(v);
      else if (k == "converged")
        t.converged = v == "1";
      else if (k == "outliers" && v != "-") {
        std::istringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) t.outlier_tokens.push_back(static_cast<TokenId>(std::stoul(item)));
      }
    }
  } catch (const std::logic_error& e) {
    throw CorruptionError(std::string("malformed target header: ") + e.what());
  }
  if (n == 0 || n * 8 != r.remaining()) throw CorruptionError("target probabilities do not match vocab_size");
  std::vector<double> p(n);
  r.f64s(p);
  r.finish();
  try {
    t.distribution = ProbVector(std::move(p));
  } catch (const InvalidArgument& e) {
    throw CorruptionError(std::string("stored distribution invalid: ") + e.what());
  }
  if (!(std::abs(t.distribution.entropy_bits() - stored_entropy) <= 1e-9))
    throw CorruptionError("stored entropy does not match the probabilities");
  return t;
}

std::vector<std::uint8_t> encode_prompt(const PromptState& s) {
  Writer w;
  w.u64(s.layout.size());
  w.u64(s.embeddings.cols);
  for (auto k : s.layout.kinds) w.u8(static_cast<std::uint8_t>(k));
  w.u64(s.hard_tokens.size());
  for (TokenId t : s.hard_tokens) w.u32(t);
  w.f64s(s.embeddings.data);
  return wrap(ArtifactKind::prompt, w.take());
}

PromptState decode_prompt(const std::vector<std::uint8_t>& bytes) {
  Reader r = open_payload(bytes, ArtifactKind::prompt);
  PromptState s;
  const auto n = r.u64();
  const auto d = r.u64();
  if (n > r.remaining()) throw CorruptionError("prompt length exceeds payload");
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto k = r.u8();
    if (k > 1) throw CorruptionError("bad position kind");
    s.layout.kinds.push_back(static_cast<PositionKind>(k));
  }
  const auto h = r.u64();
  if (h != s.layout.hard_count()) throw CorruptionError("hard token count does not match layout");
  for (std::uint64_t i = 0; i < h; ++i) s.hard_tokens.push_back(r.u32());
  if (d == 0 || r.remaining() != n * d * 8) throw CorruptionError("prompt embedding size mismatch");
  s.embeddings = Matrix(n, d);
  r.f64s(s.embeddings.data);
  r.finish();
  return s;
}

std::vector<std::uint8_t> encode_plan(const ExperimentPlan& plan) {
  const std::string text = to_text(plan);
  return wrap(ArtifactKind::plan, std::vector<std::uint8_t>(text.begin(), text.end()));
}

ExperimentPlan decode_plan(const std::vector<std::uint8_t>& bytes) {
  open_payload(bytes, ArtifactKind::plan);
  const std::string text(bytes.begin() + kHeaderSize, bytes.end());
  try {
    return parse_plan(text);
  } catch (const InvalidArgument& e) {
    throw CorruptionError(std::string("stored plan invalid: ") + e.what());
  }
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

void save_model(const std::string& path, const ModelBundle& model) { write_file(path, encode_model(model)); }
ModelBundle load_model(const std::string& path) { return decode_model(read_file(path)); }

std::string target_summary(const TargetArtifact& t) {
  std::ostringstream ss;
  ss.precision(12);
  double sum = 0.0;
  for (double p : t.distribution.probs()) sum += p;
  ss << "kind: " << to_string(t.kind) << '\n'
     << "vocab_size: " << t.distribution.size() << '\n'
     << "seed: " << t.seed << '\n'
     << "target_entropy_bits: " << t.target_entropy_bits << '\n'
     << "achieved_entropy_bits: " << t.distribution.entropy_bits() << '\n'
     << "entropy_gap_bits: " << std::abs(t.distribution.entropy_bits() - t.target_entropy_bits) << '\n'
     << "probability_sum: " << sum << '\n'
     << "converged: " << (t.converged ? "yes" : "no") << '\n';
  if (!t.outlier_tokens.empty()) {
    double mass = 0.0;
    ss << "outlier_tokens:";
    for (TokenId o : t.outlier_tokens) {
      ss << ' ' << o;
      mass += t.distribution[o];
    }
    ss << '\n' << "outlier_mass: " << mass << '\n' << "outlier_mass_bound: " << t.mass_bound << '\n';
  }
  return ss.str();
}

void save_target(const std::string& path, const TargetArtifact& target) {
  write_file(path, encode_target(target));
  const std::string meta_path = std::filesystem::path(path).replace_extension(".meta").string();
  std::ofstream meta(meta_path);
  if (!meta) throw IoError("cannot open " + meta_path + " for writing");
  meta << target_summary(target);
}

TargetArtifact load_target(const std::string& path) { return decode_target(read_file(path)); }
void save_prompt(const std::string& path, const PromptState& prompt) { write_file(path, encode_prompt(prompt)); }
PromptState load_prompt(const std::string& path) { return decode_prompt(read_file(path)); }
void save_plan(const std::string& path, const ExperimentPlan& plan) { write_file(path, encode_plan(plan)); }
ExperimentPlan load_plan(const std::string& path) { return decode_plan(read_file(path)); }

}  // namespace elab
