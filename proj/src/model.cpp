#include "elab/model.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <string>

#include "elab/error.hpp"
#include "elab/kernels.hpp"
#include "elab/rng.hpp"

namespace elab {

namespace k = kernels::omp;

void ModelConfig::validate() const {
  if (vocab_size == 0) throw InvalidArgument("vocab_size must be positive");
  if (embed_dim == 0) throw InvalidArgument("embed_dim must be positive");
  if (num_layers == 0) throw InvalidArgument("num_layers must be positive");
  if (num_heads == 0) throw InvalidArgument("num_heads must be positive");
  if (embed_dim % num_heads != 0) throw InvalidArgument("num_heads must divide embed_dim");
  if (mlp_hidden == 0) throw InvalidArgument("mlp_hidden must be positive");
  if (max_positions == 0) throw InvalidArgument("max_positions must be positive");
  if (!(layernorm_epsilon > 0.0) || !std::isfinite(layernorm_epsilon))
    throw InvalidArgument("layernorm_epsilon must be a small positive real");
  if (vocab_size > UINT32_MAX) throw InvalidArgument("vocab_size exceeds 32-bit token ids");
}

ModelBundle allocate_model(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.embed_dim;
  const std::size_t h = config.mlp_hidden;
  const std::size_t v = config.vocab_size;
  ModelBundle m;
  m.config = config;
  m.token_embeddings = Matrix(v, d);
  m.position_embeddings = Matrix(config.max_positions, d);
  m.blocks.resize(config.num_layers);
  for (auto& b : m.blocks) {
    b.ln_attn = {std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    b.qkv = Matrix(d, 3 * d);
    b.qkv_bias.assign(3 * d, 0.0);
    b.attn_out = Matrix(d, d);
    b.attn_out_bias.assign(d, 0.0);
    b.ln_mlp = {std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    b.mlp_in = Matrix(d, h);
    b.mlp_in_bias.assign(h, 0.0);
    b.mlp_out = Matrix(h, d);
    b.mlp_out_bias.assign(d, 0.0);
  }
  m.ln_final = {std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  m.output_projection = Matrix(d, v);
  return m;
}

ModelBundle init_random_model(const ModelConfig& config) {
  ModelBundle m = allocate_model(config);
  Rng rng(config.seed);
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  auto fill = [&](std::vector<double>& xs, double stddev) {
    for (double& x : xs) x = stddev * rng.normal();
  };
  fill(m.token_embeddings.data, 1.0);
  fill(m.position_embeddings.data, 1.0);
  for (auto& b : m.blocks) {
    b.ln_attn.gamma.assign(config.embed_dim, 1.0);
    fill(b.qkv.data, proj_std);
    fill(b.attn_out.data, proj_std);
    b.ln_mlp.gamma.assign(config.embed_dim, 1.0);
    fill(b.mlp_in.data, proj_std);
    fill(b.mlp_out.data, 1.0 / std::sqrt(static_cast<double>(config.mlp_hidden)));
  }
  m.ln_final.gamma.assign(config.embed_dim, 1.0);
  fill(m.output_projection.data, proj_std);
  return m;
}

EmbeddingSequence embed_tokens(const ModelBundle& model, std::span<const TokenId> tokens) {
  const std::size_t d = model.config.embed_dim;
  EmbeddingSequence out(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= model.config.vocab_size)
      throw InvalidToken("token id " + std::to_string(tokens[i]) + " >= vocab size " +
                         std::to_string(model.config.vocab_size));
    auto src = model.token_embeddings.row(tokens[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> rstd;
};

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, double eps, LayerNormCache& cache) {
  const std::size_t n = x.rows, d = x.cols;
  Matrix y(n, d);
  cache.xhat = Matrix(n, d);
  cache.rstd.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    cache.rstd[i] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (x(i, j) - mean) * rstd;
      cache.xhat(i, j) = xh;
      y(i, j) = p.gamma[j] * xh + p.beta[j];
    }
  }
  return y;
}

void layer_norm_backward_row(std::span<const double> dy, std::span<const double> xhat, double rstd,
                             const LayerNormParams& p, std::span<double> dx_accum) {
  const std::size_t d = dy.size();
  double mean_g = 0.0, mean_gx = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double g = dy[j] * p.gamma[j];
    mean_g += g;
    mean_gx += g * xhat[j];
  }
  mean_g /= static_cast<double>(d);
  mean_gx /= static_cast<double>(d);
  for (std::size_t j = 0; j < d; ++j)
    dx_accum[j] += rstd * (dy[j] * p.gamma[j] - mean_g - xhat[j] * mean_gx);
}

struct BlockCache {
  LayerNormCache ln_attn;
  Matrix attn_in;  // layernormed input
  Matrix qkv;
  std::vector<Matrix> att;  // per head, n x n lower-triangular weights
  Matrix heads;             // concatenated head outputs, n x d
  LayerNormCache ln_mlp;
  Matrix mlp_in;  // layernormed mid-stream
  Matrix pre_act;
  Matrix act;
};

struct ForwardCache {
  std::vector<Matrix> residual;  // num_layers + 1 entries
  std::vector<BlockCache> blocks;
  LayerNormCache ln_final;
  std::vector<double> logits;
  std::size_t offset = 0;  // rows occupied by the leading token
};

Matrix assemble_input(const ModelBundle& model, const EmbeddingSequence& prefix, const ForwardOptions& options,
                      std::size_t& offset) {
  const auto& cfg = model.config;
  if (prefix.rows == 0) throw InvalidArgument("prefix must contain at least one row");
  if (prefix.cols != cfg.embed_dim)
    throw InvalidArgument("prefix width " + std::to_string(prefix.cols) + " != embed_dim " +
                          std::to_string(cfg.embed_dim));
  offset = options.leading_token ? 1 : 0;
  const std::size_t n = prefix.rows + offset;
  if (n > cfg.max_positions)
    throw CapacityError("sequence of length " + std::to_string(n) + " exceeds max_positions " +
                        std::to_string(cfg.max_positions));
  Matrix x(n, cfg.embed_dim);
  if (options.leading_token) {
    const TokenId t = *options.leading_token;
    if (t >= cfg.vocab_size) throw InvalidToken("leading token outside vocabulary");
    auto src = model.token_embeddings.row(t);
    std::copy(src.begin(), src.end(), x.row(0).begin());
  }
  std::copy(prefix.data.begin(), prefix.data.end(), x.data.begin() + static_cast<std::ptrdiff_t>(offset * cfg.embed_dim));
  for (std::size_t i = 0; i < n; ++i) {
    auto pos = model.position_embeddings.row(i);
    auto row = x.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += pos[j];
  }
  return x;
}

Matrix block_forward(const ModelBundle& model, const BlockWeights& w, const Matrix& x, BlockCache& c) {
  const auto& cfg = model.config;
  const std::size_t n = x.rows, d = cfg.embed_dim, nh = cfg.num_heads, hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  c.attn_in = layer_norm(x, w.ln_attn, cfg.layernorm_epsilon, c.ln_attn);
  k::matmul(c.attn_in, w.qkv, w.qkv_bias, c.qkv);

  c.att.assign(nh, Matrix(n, n));
  c.heads = Matrix(n, d);
  for (std::size_t h = 0; h < nh; ++h) {
    const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
    Matrix& a = c.att[h];
    for (std::size_t i = 0; i < n; ++i) {
      double hi = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) s += c.qkv(i, qo + t) * c.qkv(j, ko + t);
        a(i, j) = s * scale;
        hi = std::max(hi, a(i, j));
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        a(i, j) = std::exp(a(i, j) - hi);
        z += a(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) a(i, j) /= z;
      for (std::size_t t = 0; t < hd; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) acc += a(i, j) * c.qkv(j, vo + t);
        c.heads(i, qo + t) = acc;
      }
    }
  }

  Matrix attn;
  k::matmul(c.heads, w.attn_out, w.attn_out_bias, attn);
  Matrix mid = x;
  for (std::size_t i = 0; i < mid.data.size(); ++i) mid.data[i] += attn.data[i];

  c.mlp_in = layer_norm(mid, w.ln_mlp, cfg.layernorm_epsilon, c.ln_mlp);
  k::matmul(c.mlp_in, w.mlp_in, w.mlp_in_bias, c.pre_act);
  c.act = c.pre_act;
  for (double& v : c.act.data) v = gelu(v);
  Matrix mlp;
  k::matmul(c.act, w.mlp_out, w.mlp_out_bias, mlp);
  for (std::size_t i = 0; i < mid.data.size(); ++i) mid.data[i] += mlp.data[i];
  return mid;
}

// dx is the gradient of the block output on entry, of the block input on exit.
void block_backward(const ModelBundle& model, const BlockWeights& w, const BlockCache& c, Matrix& dx) {
  const auto& cfg = model.config;
  const std::size_t n = dx.rows, d = cfg.embed_dim, nh = cfg.num_heads, hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // MLP branch; residual passes dx through unchanged.
  Matrix dact;
  k::matmul_grad_input(dx, w.mlp_out, dact);
  for (std::size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= gelu_grad(c.pre_act.data[i]);
  Matrix dmlp_in;
  k::matmul_grad_input(dact, w.mlp_in, dmlp_in);
  for (std::size_t i = 0; i < n; ++i)
    layer_norm_backward_row(dmlp_in.row(i), c.ln_mlp.xhat.row(i), c.ln_mlp.rstd[i], w.ln_mlp, dx.row(i));

  // Attention branch.
  Matrix dheads;
  k::matmul_grad_input(dx, w.attn_out, dheads);
  Matrix dqkv(n, 3 * d);
  std::vector<double> datt(n);
  for (std::size_t h = 0; h < nh; ++h) {
    const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
    const Matrix& a = c.att[h];
    for (std::size_t i = 0; i < n; ++i) {
      double weighted = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) {
          s += dheads(i, qo + t) * c.qkv(j, vo + t);
          dqkv(j, vo + t) += a(i, j) * dheads(i, qo + t);
        }
        datt[j] = s;
        weighted += a(i, j) * s;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const double ds = a(i, j) * (datt[j] - weighted) * scale;
        for (std::size_t t = 0; t < hd; ++t) {
          dqkv(i, qo + t) += ds * c.qkv(j, ko + t);
          dqkv(j, ko + t) += ds * c.qkv(i, qo + t);
        }
      }
    }
  }
  Matrix dattn_in;
  k::matmul_grad_input(dqkv, w.qkv, dattn_in);
  for (std::size_t i = 0; i < n; ++i)
    layer_norm_backward_row(dattn_in.row(i), c.ln_attn.xhat.row(i), c.ln_attn.rstd[i], w.ln_attn, dx.row(i));
}

void run_forward(const ModelBundle& model, const EmbeddingSequence& prefix, const ForwardOptions& options,
                 ForwardCache& cache) {
  const auto& cfg = model.config;
  Matrix x = assemble_input(model, prefix, options, cache.offset);
  cache.residual.clear();
  cache.residual.push_back(x);
  cache.blocks.resize(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    x = block_forward(model, model.blocks[l], x, cache.blocks[l]);
    cache.residual.push_back(x);
  }
  // Only the last position feeds the output head.
  Matrix last(1, cfg.embed_dim);
  auto src = x.row(x.rows - 1);
  std::copy(src.begin(), src.end(), last.data.begin());
  Matrix normed = layer_norm(last, model.ln_final, cfg.layernorm_epsilon, cache.ln_final);
  cache.logits.assign(cfg.vocab_size, 0.0);
  k::vecmat(normed.row(0), model.output_projection, cache.logits);
  for (double z : cache.logits)
    if (!std::isfinite(z)) throw NumericError("non-finite logit in forward pass");
}

}  // namespace

std::vector<double> next_token_logits(const ModelBundle& model, const EmbeddingSequence& prefix,
                                      const ForwardOptions& options) {
  ForwardCache cache;
  run_forward(model, prefix, options, cache);
  return cache.logits;
}

ProbVector next_token_distribution(const ModelBundle& model, const EmbeddingSequence& prefix,
                                   const ForwardOptions& options) {
  return ProbVector::softmax(next_token_logits(model, prefix, options));
}

std::vector<Matrix> hidden_states(const ModelBundle& model, const EmbeddingSequence& prefix,
                                  const ForwardOptions& options) {
  ForwardCache cache;
  run_forward(model, prefix, options, cache);
  return cache.residual;
}

Evaluation kl_loss(const ModelBundle& model, const EmbeddingSequence& prefix, const ProbVector& target,
                   const ForwardOptions& options) {
  if (target.size() != model.config.vocab_size) throw InvalidArgument("target size != vocab size");
  ProbVector q = next_token_distribution(model, prefix, options);
  const double loss = kl_nats(target.probs(), q.probs());
  if (!std::isfinite(loss)) throw NumericError("non-finite KL loss");
  return {loss, std::move(q)};
}

LossAndGradient kl_loss_and_prefix_gradient(const ModelBundle& model, const EmbeddingSequence& prefix,
                                            const ProbVector& target, const ForwardOptions& options) {
  const auto& cfg = model.config;
  if (target.size() != cfg.vocab_size) throw InvalidArgument("target size != vocab size");
  ForwardCache cache;
  run_forward(model, prefix, options, cache);
  ProbVector q = ProbVector::softmax(cache.logits);
  const double loss = kl_nats(target.probs(), q.probs());
  if (!std::isfinite(loss)) throw NumericError("non-finite KL loss");

  // d/dz_v sum_u p_u (log p_u - log q_u) = q_v * sum(p) - p_v
  double mass = 0.0;
  for (double p : target.probs()) mass += p;
  std::vector<double> dlogits(cfg.vocab_size);
  for (std::size_t v = 0; v < cfg.vocab_size; ++v) dlogits[v] = q[v] * mass - target[v];

  std::vector<double> dnormed(cfg.embed_dim);
  k::matvec(model.output_projection, dlogits, dnormed);

  const std::size_t n = cache.residual.front().rows;
  Matrix dx(n, cfg.embed_dim);
  layer_norm_backward_row(dnormed, cache.ln_final.xhat.row(0), cache.ln_final.rstd[0], model.ln_final,
                          dx.row(n - 1));
  for (std::size_t l = cfg.num_layers; l-- > 0;) block_backward(model, model.blocks[l], cache.blocks[l], dx);

  Matrix grad(prefix.rows, cfg.embed_dim);
  std::copy(dx.data.begin() + static_cast<std::ptrdiff_t>(cache.offset * cfg.embed_dim), dx.data.end(),
            grad.data.begin());
  return {loss, std::move(q), std::move(grad)};
}

std::uint64_t checksum(const ModelBundle& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const auto& c = model.config;
  for (std::uint64_t v : {c.vocab_size, c.embed_dim, c.num_layers, c.num_heads, c.mlp_hidden, c.max_positions, c.seed})
    eat(&v, sizeof v);
  eat(&c.layernorm_epsilon, sizeof c.layernorm_epsilon);
  for_each_tensor(model, [&](std::span<const double> t) { eat(t.data(), t.size_bytes()); });
  return h;
}

}  // namespace elab
