#include "ctl/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace ctl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order and assume little endian");

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;
using MapMat = Eigen::Map<Mat>;
using CMapMat = Eigen::Map<const Mat>;
using MapRow = Eigen::Map<RowVec>;
using CMapRow = Eigen::Map<const RowVec>;

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

void Require(std::vector<std::string>& out, bool ok, const std::string& msg) {
  if (!ok) out.push_back(msg);
}

void LayerNormForward(const Mat& x, CMapRow g, CMapRow b, Mat& y, Mat& xhat, Vec& rstd) {
  const double d = static_cast<double>(x.cols());
  const Vec mean = x.rowwise().mean();
  xhat = x.colwise() - mean;
  const Vec var = xhat.array().square().rowwise().sum() / d;
  rstd = (var.array() + kLnEps).rsqrt();
  xhat = xhat.array().colwise() * rstd.array();
  y = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
}

// Adds the input gradient into dx and parameter gradients into dg/db.
void LayerNormBackward(const Mat& dy, const Mat& xhat, const Vec& rstd, CMapRow g, Mat& dx,
                       MapRow dg, MapRow db, double scale) {
  dg += scale * (dy.array() * xhat.array()).colwise().sum().matrix();
  db += scale * dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * g.array();
  const Vec m1 = dxhat.rowwise().mean();
  const Vec m2 = (dxhat.array() * xhat.array()).rowwise().mean();
  const Mat centered = dxhat.colwise() - m1;
  dx += ((centered.array() - xhat.array().colwise() * m2.array()).colwise() * rstd.array()).matrix();
}

Mat Gelu(const Mat& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); });
}

Mat GeluGrad(const Mat& x) {
  return x.unaryExpr([](double v) {
    const double u = kGeluC * (v + 0.044715 * v * v * v);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
  });
}

void DropoutMask(Rng& rng, double p, Eigen::Index rows, Eigen::Index cols, Mat& mask) {
  mask.resize(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) mask(r, c) = rng.Uniform() < p ? 0.0 : keep;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs.

std::vector<std::string> ModelConfig::Validate() const {
  std::vector<std::string> v;
  Require(v, n_layers >= 1, "model: n_layers must be >= 1");
  Require(v, n_heads >= 1, "model: n_heads must be >= 1");
  Require(v, model_dim >= 1, "model: model_dim must be >= 1");
  Require(v, n_heads >= 1 && model_dim % n_heads == 0, "model: model_dim must be divisible by n_heads");
  Require(v, ff_dim >= 1, "model: ff_dim must be >= 1");
  Require(v, max_seq_len >= 16, "model: max_seq_len must be >= 16");
  Require(v, dropout >= 0.0 && dropout < 1.0, "model: dropout must be in [0, 1)");
  return v;
}

Json ModelConfig::ToJson() const {
  return Json{{"n_layers", n_layers},   {"n_heads", n_heads},         {"model_dim", model_dim},
              {"ff_dim", ff_dim},       {"max_seq_len", max_seq_len}, {"dropout", dropout},
              {"seed", seed}};
}

ModelConfig ModelConfig::FromJson(const Json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.dropout = j.value("dropout", c.dropout);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<std::string> OptimizerConfig::Validate() const {
  std::vector<std::string> v;
  Require(v, learning_rate > 0.0, "optimizer: learning_rate must be > 0");
  Require(v, beta1 > 0.0 && beta1 < 1.0, "optimizer: beta1 must be in (0, 1)");
  Require(v, beta2 > 0.0 && beta2 < 1.0, "optimizer: beta2 must be in (0, 1)");
  Require(v, eps > 0.0, "optimizer: eps must be > 0");
  Require(v, weight_decay >= 0.0, "optimizer: weight_decay must be >= 0");
  Require(v, warmup_ratio >= 0.0 && warmup_ratio <= 1.0, "optimizer: warmup_ratio must be in [0, 1]");
  Require(v, grad_accum >= 1, "optimizer: grad_accum must be >= 1");
  Require(v, epochs >= 1, "optimizer: epochs must be >= 1");
  Require(v, patience >= 1, "optimizer: patience must be >= 1");
  return v;
}

Json OptimizerConfig::ToJson() const {
  return Json{{"learning_rate", learning_rate}, {"beta1", beta1},
              {"beta2", beta2},                 {"eps", eps},
              {"weight_decay", weight_decay},   {"warmup_ratio", warmup_ratio},
              {"grad_clip", grad_clip},         {"grad_accum", grad_accum},
              {"epochs", epochs},               {"patience", patience}};
}

OptimizerConfig OptimizerConfig::FromJson(const Json& j) {
  OptimizerConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.grad_accum = j.value("grad_accum", c.grad_accum);
  c.epochs = j.value("epochs", c.epochs);
  c.patience = j.value("patience", c.patience);
  return c;
}

double LearningRate(const OptimizerConfig& opt, std::int64_t step, std::int64_t total_steps) {
  const double warmup = opt.warmup_ratio * static_cast<double>(total_steps);
  if (warmup > 0.0 && static_cast<double>(step) < warmup) {
    return opt.learning_rate * static_cast<double>(step) / warmup;
  }
  return opt.learning_rate;
}

const char* LabelModeName(LabelMode m) {
  return m == LabelMode::kFullLm ? "full_lm" : "concepts_only";
}

LabelMode ParseLabelMode(const std::string& s) {
  if (s == "concepts_only") return LabelMode::kConceptsOnly;
  if (s == "full_lm") return LabelMode::kFullLm;
  throw ConfigError("unknown label mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// Data.

std::vector<int> DeriveLabels(const std::vector<int>& ids, const Vocabulary& vocab, LabelMode mode) {
  const int pad = vocab.pad_id();
  std::vector<int> labels(ids.size(), Vocabulary::kIgnoreLabel);
  for (std::size_t j = 0; j + 1 < ids.size(); ++j) {
    const int next = ids[j + 1];
    const bool supervised =
        mode == LabelMode::kFullLm ? next != pad : vocab.IsConcept(next);
    if (supervised) labels[j] = next;
  }
  return labels;
}

std::vector<TrainingExample> PackExamples(const std::vector<EncodedNote>& notes, const Vocabulary& vocab,
                                          int max_seq_len, LabelMode mode) {
  if (notes.empty()) throw DataError("cannot pack zero notes");
  if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
  std::vector<int> stream;
  const int bos = vocab.bos_id();
  for (const auto& n : notes) {
    stream.push_back(bos);
    stream.insert(stream.end(), n.token_ids.begin(), n.token_ids.end());
  }
  const auto len = static_cast<std::size_t>(max_seq_len);
  std::vector<TrainingExample> out;
  for (std::size_t start = 0; start < stream.size(); start += len) {
    TrainingExample ex;
    const std::size_t end = std::min(stream.size(), start + len);
    ex.input_ids.assign(stream.begin() + static_cast<std::ptrdiff_t>(start),
                        stream.begin() + static_cast<std::ptrdiff_t>(end));
    ex.input_ids.resize(len, vocab.pad_id());
    ex.label_ids = DeriveLabels(ex.input_ids, vocab, mode);
    out.push_back(std::move(ex));
  }
  return out;
}

double SelectiveNll(const Mat& logits, const std::vector<int>& labels, Mat* dlogits) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw DataError("logits rows and labels differ in length");
  }
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  int count = 0;
  for (int l : labels) count += l != Vocabulary::kIgnoreLabel;
  if (count == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label == Vocabulary::kIgnoreLabel) continue;
    if (label < 0 || label >= logits.cols()) throw DataError("label id out of range");
    const double mx = logits.row(r).maxCoeff();
    const RowVec e = (logits.row(r).array() - mx).exp();
    const double z = e.sum();
    total += -(logits(r, label) - mx - std::log(z));
    if (dlogits) {
      dlogits->row(r) = e / (z * count);
      (*dlogits)(r, label) -= 1.0 / count;
    }
  }
  return total / count;
}

// ---------------------------------------------------------------------------
// Transformer.

struct Transformer::Cache {
  struct Layer {
    Mat xhat1, a, qkv, att, xhat2, m, hpre, g, drop1, drop2;
    Vec rstd1, rstd2;
    std::vector<Mat> probs;  // per head, T x T, zero above the diagonal
  };
  std::vector<Layer> layers;
  Mat xhat_f, xf;
  Vec rstd_f;
};

Transformer::Transformer(const ModelConfig& config, int vocab_size)
    : config_(config), vocab_size_(vocab_size) {
  if (auto v = config.Validate(); !v.empty()) throw ConfigError(v.front());
  if (vocab_size < 1) throw ConfigError("vocabulary is empty");
  std::size_t offset = 0;
  auto add = [&](const std::string& name, int rows, int cols) {
    layout_.push_back({name, offset, rows, cols});
    const std::size_t at = offset;
    offset += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    return at;
  };
  const int d = config.model_dim;
  const int f = config.ff_dim;
  wte_ = add("wte", vocab_size, d);
  wpe_ = add("wpe", config.max_seq_len, d);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    LayerOffsets o{};
    o.ln1_g = add(p + "ln1.g", 1, d);
    o.ln1_b = add(p + "ln1.b", 1, d);
    o.w_qkv = add(p + "attn.w_qkv", d, 3 * d);
    o.b_qkv = add(p + "attn.b_qkv", 1, 3 * d);
    o.w_o = add(p + "attn.w_o", d, d);
    o.b_o = add(p + "attn.b_o", 1, d);
    o.ln2_g = add(p + "ln2.g", 1, d);
    o.ln2_b = add(p + "ln2.b", 1, d);
    o.w_fc = add(p + "mlp.w_fc", d, f);
    o.b_fc = add(p + "mlp.b_fc", 1, f);
    o.w_proj = add(p + "mlp.w_proj", f, d);
    o.b_proj = add(p + "mlp.b_proj", 1, d);
    layers_.push_back(o);
  }
  lnf_g_ = add("lnf.g", 1, d);
  lnf_b_ = add("lnf.b", 1, d);
  params_.assign(offset, 0.0);
  InitRandom(config.seed);
}

void Transformer::InitRandom(std::uint64_t seed) {
  Rng rng(seed);
  const double proj_std = 0.02 / std::sqrt(2.0 * config_.n_layers);
  for (const auto& p : layout_) {
    const std::size_t n = static_cast<std::size_t>(p.rows) * static_cast<std::size_t>(p.cols);
    double* data = params_.data() + p.offset;
    const bool gain = p.name.ends_with(".g");
    const bool bias = p.rows == 1 && !gain;
    const bool proj = p.name.ends_with("w_o") || p.name.ends_with("w_proj");
    for (std::size_t i = 0; i < n; ++i) {
      if (gain) data[i] = 1.0;
      else if (bias) data[i] = 0.0;
      else data[i] = rng.Normal(0.0, proj ? proj_std : 0.02);
    }
  }
}

void Transformer::SetEmbeddings(const EmbeddingMatrix& embeddings) {
  if (embeddings.rows() != vocab_size_ || embeddings.cols() != config_.model_dim) {
    throw DataError("embedding matrix shape does not match the model");
  }
  MapMat(params_.data() + wte_, vocab_size_, config_.model_dim) = embeddings;
}

EmbeddingMatrix Transformer::Embeddings() const {
  return CMapMat(params_.data() + wte_, vocab_size_, config_.model_dim);
}

void Transformer::RunForward(const std::vector<int>& ids, Cache& cache, Rng* dropout_rng) const {
  const auto t = static_cast<Eigen::Index>(ids.size());
  const int d = config_.model_dim;
  const int h = config_.n_heads;
  const int hd = d / h;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (t == 0) throw DataError("empty input sequence");
  if (t > config_.max_seq_len) throw DataError("input longer than max_seq_len");
  const double* p = params_.data();
  CMapMat wte(p + wte_, vocab_size_, d);
  CMapMat wpe(p + wpe_, config_.max_seq_len, d);

  Mat x(t, d);
  for (Eigen::Index i = 0; i < t; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= vocab_size_) throw DataError("token id out of range");
    x.row(i) = wte.row(id) + wpe.row(i);
  }
  const bool drop = dropout_rng != nullptr && config_.dropout > 0.0;
  cache.layers.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& o = layers_[l];
    auto& c = cache.layers[l];
    LayerNormForward(x, CMapRow(p + o.ln1_g, d), CMapRow(p + o.ln1_b, d), c.a, c.xhat1, c.rstd1);
    c.qkv = c.a * CMapMat(p + o.w_qkv, d, 3 * d);
    c.qkv.rowwise() += CMapRow(p + o.b_qkv, 3 * d);
    c.att.resize(t, d);
    c.probs.resize(static_cast<std::size_t>(h));
    for (int head = 0; head < h; ++head) {
      const auto q = c.qkv.middleCols(head * hd, hd);
      const auto k = c.qkv.middleCols(d + head * hd, hd);
      const auto v = c.qkv.middleCols(2 * d + head * hd, hd);
      Mat s = (q * k.transpose()) * scale;
      Mat& pr = c.probs[static_cast<std::size_t>(head)];
      pr.setZero(t, t);
      for (Eigen::Index i = 0; i < t; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          pr(i, j) = std::exp(s(i, j) - mx);
          z += pr(i, j);
        }
        pr.row(i).head(i + 1) /= z;
      }
      c.att.middleCols(head * hd, hd) = pr * v;
    }
    Mat y = c.att * CMapMat(p + o.w_o, d, d);
    y.rowwise() += CMapRow(p + o.b_o, d);
    if (drop) {
      DropoutMask(*dropout_rng, config_.dropout, t, d, c.drop1);
      y = y.cwiseProduct(c.drop1);
    }
    x += y;
    LayerNormForward(x, CMapRow(p + o.ln2_g, d), CMapRow(p + o.ln2_b, d), c.m, c.xhat2, c.rstd2);
    c.hpre = c.m * CMapMat(p + o.w_fc, d, config_.ff_dim);
    c.hpre.rowwise() += CMapRow(p + o.b_fc, config_.ff_dim);
    c.g = Gelu(c.hpre);
    Mat z = c.g * CMapMat(p + o.w_proj, config_.ff_dim, d);
    z.rowwise() += CMapRow(p + o.b_proj, d);
    if (drop) {
      DropoutMask(*dropout_rng, config_.dropout, t, d, c.drop2);
      z = z.cwiseProduct(c.drop2);
    }
    x += z;
  }
  LayerNormForward(x, CMapRow(p + lnf_g_, d), CMapRow(p + lnf_b_, d), cache.xf, cache.xhat_f,
                   cache.rstd_f);
}

Mat Transformer::Forward(const std::vector<int>& ids) const {
  Cache cache;
  RunForward(ids, cache, nullptr);
  return cache.xf * CMapMat(params_.data() + wte_, vocab_size_, config_.model_dim).transpose();
}

Vec Transformer::NextLogits(const std::vector<int>& prefix) const {
  std::vector<int> ids = prefix;
  const auto limit = static_cast<std::size_t>(config_.max_seq_len);
  if (ids.size() > limit) ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(limit));
  Cache cache;
  RunForward(ids, cache, nullptr);
  CMapMat wte(params_.data() + wte_, vocab_size_, config_.model_dim);
  return wte * cache.xf.row(cache.xf.rows() - 1).transpose();
}

double Transformer::ForwardBackward(const std::vector<int>& ids, const std::vector<int>& labels,
                                    std::vector<double>& grads, double scale, Rng* dropout_rng) const {
  if (ids.size() != labels.size()) throw DataError("ids and labels differ in length");
  if (grads.size() != params_.size()) grads.assign(params_.size(), 0.0);
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != Vocabulary::kIgnoreLabel) rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (rows.empty()) return 0.0;

  Cache cache;
  RunForward(ids, cache, dropout_rng);
  const auto t = static_cast<Eigen::Index>(ids.size());
  const int d = config_.model_dim;
  const int h = config_.n_heads;
  const int hd = d / h;
  const int f = config_.ff_dim;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* p = params_.data();
  double* gp = grads.data();
  CMapMat wte(p + wte_, vocab_size_, d);
  MapMat dwte(gp + wte_, vocab_size_, d);

  // Output head on supervised rows only; other rows have zero gradient.
  const auto r = static_cast<Eigen::Index>(rows.size());
  Mat xs(r, d);
  std::vector<int> sel_labels(rows.size());
  for (Eigen::Index i = 0; i < r; ++i) {
    xs.row(i) = cache.xf.row(rows[static_cast<std::size_t>(i)]);
    sel_labels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
  }
  const Mat logits = xs * wte.transpose();
  Mat dlogits;
  const double loss = SelectiveNll(logits, sel_labels, &dlogits);
  dwte += scale * dlogits.transpose() * xs;
  const Mat dxs = dlogits * wte;
  Mat dxf = Mat::Zero(t, d);
  for (Eigen::Index i = 0; i < r; ++i) dxf.row(rows[static_cast<std::size_t>(i)]) = dxs.row(i);

  Mat dx = Mat::Zero(t, d);
  LayerNormBackward(dxf, cache.xhat_f, cache.rstd_f, CMapRow(p + lnf_g_, d), dx, MapRow(gp + lnf_g_, d),
                    MapRow(gp + lnf_b_, d), scale);

  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& o = layers_[li];
    const auto& c = cache.layers[li];
    // MLP branch.
    Mat dz = c.drop2.size() ? Mat(dx.cwiseProduct(c.drop2)) : dx;
    MapMat(gp + o.w_proj, f, d) += scale * c.g.transpose() * dz;
    MapRow(gp + o.b_proj, d) += scale * dz.colwise().sum();
    const Mat dg = dz * CMapMat(p + o.w_proj, f, d).transpose();
    const Mat dh = dg.cwiseProduct(GeluGrad(c.hpre));
    MapMat(gp + o.w_fc, d, f) += scale * c.m.transpose() * dh;
    MapRow(gp + o.b_fc, f) += scale * dh.colwise().sum();
    const Mat dm = dh * CMapMat(p + o.w_fc, d, f).transpose();
    LayerNormBackward(dm, c.xhat2, c.rstd2, CMapRow(p + o.ln2_g, d), dx, MapRow(gp + o.ln2_g, d),
                      MapRow(gp + o.ln2_b, d), scale);
    // Attention branch.
    Mat dy = c.drop1.size() ? Mat(dx.cwiseProduct(c.drop1)) : dx;
    MapMat(gp + o.w_o, d, d) += scale * c.att.transpose() * dy;
    MapRow(gp + o.b_o, d) += scale * dy.colwise().sum();
    const Mat datt = dy * CMapMat(p + o.w_o, d, d).transpose();
    Mat dqkv(t, 3 * d);
    for (int head = 0; head < h; ++head) {
      const auto q = c.qkv.middleCols(head * hd, hd);
      const auto k = c.qkv.middleCols(d + head * hd, hd);
      const auto v = c.qkv.middleCols(2 * d + head * hd, hd);
      const Mat& pr = c.probs[static_cast<std::size_t>(head)];
      const auto dout = datt.middleCols(head * hd, hd);
      const Mat dp = dout * v.transpose();
      dqkv.middleCols(2 * d + head * hd, hd) = pr.transpose() * dout;
      const Vec rowdot = (pr.array() * dp.array()).rowwise().sum();
      const Mat ds = (pr.array() * (dp.colwise() - rowdot).array()).matrix() * att_scale;
      dqkv.middleCols(head * hd, hd) = ds * k;
      dqkv.middleCols(d + head * hd, hd) = ds.transpose() * q;
    }
    MapMat(gp + o.w_qkv, d, 3 * d) += scale * c.a.transpose() * dqkv;
    MapRow(gp + o.b_qkv, 3 * d) += scale * dqkv.colwise().sum();
    const Mat da = dqkv * CMapMat(p + o.w_qkv, d, 3 * d).transpose();
    LayerNormBackward(da, c.xhat1, c.rstd1, CMapRow(p + o.ln1_g, d), dx, MapRow(gp + o.ln1_g, d),
                      MapRow(gp + o.ln1_b, d), scale);
  }
  MapMat dwpe(gp + wpe_, config_.max_seq_len, d);
  for (Eigen::Index i = 0; i < t; ++i) {
    dwte.row(ids[static_cast<std::size_t>(i)]) += scale * dx.row(i);
    dwpe.row(i) += scale * dx.row(i);
  }
  return loss;
}

double BatchLoss(const Transformer& model, const std::vector<TrainingExample>& batch) {
  double total = 0.0;
  long count = 0;
  for (const auto& ex : batch) {
    long n = 0;
    for (int l : ex.label_ids) n += l != Vocabulary::kIgnoreLabel;
    if (n == 0) continue;
    total += SelectiveNll(model.Forward(ex.input_ids), ex.label_ids) * static_cast<double>(n);
    count += n;
  }
  if (count == 0) {
    Log(LogLevel::kWarn, "train", "batch has no supervised positions; loss defined as 0");
    return 0.0;
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Training.

TrainResult Train(Transformer& model, const std::vector<TrainingExample>& train,
                  const std::vector<TrainingExample>& heldout, const OptimizerConfig& opt,
                  std::uint64_t seed, const std::function<void(std::int64_t, double)>& on_step) {
  if (auto v = opt.Validate(); !v.empty()) throw ConfigError(v.front());
  if (train.empty()) throw DataError("no training examples");
  const std::size_t n = train.size();
  const auto accum = static_cast<std::size_t>(opt.grad_accum);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((n + accum - 1) / accum);
  const std::int64_t total_steps = steps_per_epoch * opt.epochs;

  auto& params = model.params();
  std::vector<double> grads(params.size(), 0.0), m(params.size(), 0.0), v(params.size(), 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Rng dropout_rng(seed ^ 0xd1b54a32d192ed03ULL);
  Rng* drop = model.config().dropout > 0.0 ? &dropout_rng : nullptr;

  TrainResult result;
  double initial_loss = 0.0;
  int diverged_for = 0;
  double best_heldout = std::numeric_limits<double>::infinity();
  std::vector<double> best_params;
  int bad_epochs = 0;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    shuffle_rng.Shuffle(order);
    for (std::size_t start = 0; start < n; start += accum) {
      const std::size_t end = std::min(n, start + accum);
      const double micro = static_cast<double>(end - start);
      std::fill(grads.begin(), grads.end(), 0.0);
      double loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train[order[i]];
        loss += model.ForwardBackward(ex.input_ids, ex.label_ids, grads, 1.0 / micro, drop);
      }
      loss /= micro;
      if (!std::isfinite(loss)) {
        throw StageError("training loss became non-finite at step " + std::to_string(result.steps));
      }
      if (opt.grad_clip > 0.0) {
        double sq = 0.0;
        for (double g : grads) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > opt.grad_clip) {
          const double k = opt.grad_clip / norm;
          for (double& g : grads) g *= k;
        }
      }
      const double lr = LearningRate(opt, result.steps, total_steps);
      const double t = static_cast<double>(result.steps + 1);
      const double bc1 = 1.0 - std::pow(opt.beta1, t);
      const double bc2 = 1.0 - std::pow(opt.beta2, t);
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grads[i];
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grads[i] * grads[i];
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt.eps);
        params[i] -= lr * (update + opt.weight_decay * params[i]);
      }
      result.step_losses.push_back(loss);
      if (on_step) on_step(result.steps, loss);
      ++result.steps;

      if (initial_loss <= 0.0 && loss > 0.0) initial_loss = loss;
      if (initial_loss > 0.0 && loss > 10.0 * initial_loss) {
        if (++diverged_for >= 100) {
          throw StageError("training diverged: loss " + std::to_string(loss) + " exceeded 10x the initial " +
                           std::to_string(initial_loss) + " for 100 steps (step " +
                           std::to_string(result.steps) + ")");
        }
      } else {
        diverged_for = 0;
      }
    }
    ++result.epochs_run;
    if (!heldout.empty()) {
      const double h = BatchLoss(model, heldout);
      result.heldout_losses.push_back(h);
      Log(LogLevel::kInfo, "train",
          "epoch " + std::to_string(epoch + 1) + " held-out loss " + std::to_string(h));
      if (h < best_heldout) {
        best_heldout = h;
        best_params = params;
        bad_epochs = 0;
      } else if (++bad_epochs >= opt.patience) {
        break;
      }
    }
  }
  if (!best_params.empty()) params = best_params;
  return result;
}

// ---------------------------------------------------------------------------
// Inference.

std::vector<RankedCode> RankFromLogits(const Vec& logits, const Vocabulary& vocab, const RankFilter& filter,
                                       int n) {
  const double mx = logits.maxCoeff();
  const double z = (logits.array() - mx).exp().sum();
  std::vector<RankedCode> out;
  for (int id : vocab.ConceptIds(filter.type)) {
    const auto& code = vocab.at(id).token;
    if (filter.exclude.count(code)) continue;
    out.push_back({code, std::exp(logits(id) - mx) / z});
  }
  std::sort(out.begin(), out.end(), [](const RankedCode& a, const RankedCode& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    return a.code < b.code;
  });
  if (n >= 0 && out.size() > static_cast<std::size_t>(n)) out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<RankedCode> RankNext(const NextTokenModel& model, const Vocabulary& vocab, std::vector<int> prefix,
                                 int max_seq_len, const RankFilter& filter, int n) {
  const auto limit = static_cast<std::size_t>(max_seq_len);
  if (prefix.size() > limit) prefix.erase(prefix.begin(), prefix.end() - static_cast<std::ptrdiff_t>(limit));
  return RankFromLogits(model.NextLogits(prefix), vocab, filter, n);
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

constexpr char kMagic[8] = {'C', 'T', 'L', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void WritePod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T ReadPod(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated checkpoint (" + what + ")");
  return v;
}

}  // namespace

Checkpoint MakeCheckpoint(const Transformer& model, const OptimizerConfig& opt, const Vocabulary& vocab,
                          LabelMode mode, std::int64_t step) {
  if (model.vocab_size() != vocab.size()) throw DataError("model and vocabulary sizes differ");
  return Checkpoint{model.config(), opt, vocab, mode, model.params(), step};
}

Transformer ModelFromCheckpoint(const Checkpoint& ckpt) {
  Transformer model(ckpt.model, ckpt.vocab.size());
  if (model.params().size() != ckpt.params.size()) {
    throw DataError("checkpoint parameter count does not match its config");
  }
  model.params() = ckpt.params;
  return model;
}

void SaveCheckpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const Transformer shape(ckpt.model, ckpt.vocab.size());
  if (shape.params().size() != ckpt.params.size()) {
    throw DataError("checkpoint parameter count does not match its config");
  }
  Json layout = Json::array();
  for (const auto& p : shape.layout()) layout.push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}});
  const Json header{{"model", ckpt.model.ToJson()},
                    {"optimizer", ckpt.optimizer.ToJson()},
                    {"vocab_hash", ckpt.vocab.Hash()},
                    {"vocab", ckpt.vocab.Serialize()},
                    {"label_mode", LabelModeName(ckpt.label_mode)},
                    {"ignore_label", Vocabulary::kIgnoreLabel},
                    {"step", ckpt.step},
                    {"layout", layout}};
  const std::string h = header.dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + tmp.string() + "' for writing");
    out.write(kMagic, sizeof(kMagic));
    WritePod(out, kCheckpointVersion);
    WritePod(out, static_cast<std::uint64_t>(h.size()));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    WritePod(out, static_cast<std::uint64_t>(ckpt.params.size()));
    out.write(reinterpret_cast<const char*>(ckpt.params.data()),
              static_cast<std::streamsize>(ckpt.params.size() * sizeof(double)));
    if (!out) throw DataError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("'" + path.string() + "' is not a checkpoint");
  }
  const auto version = ReadPod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto hlen = ReadPod<std::uint64_t>(in, "header length");
  std::string h(hlen, '\0');
  in.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("truncated checkpoint header");
  Checkpoint ckpt;
  try {
    const Json header = Json::parse(h);
    ckpt.model = ModelConfig::FromJson(header.at("model"));
    ckpt.optimizer = OptimizerConfig::FromJson(header.at("optimizer"));
    ckpt.vocab = Vocabulary::Deserialize(header.at("vocab").get<std::string>(), path.string());
    if (ckpt.vocab.Hash() != header.at("vocab_hash").get<std::string>()) {
      throw DataError("checkpoint vocabulary hash mismatch");
    }
    ckpt.label_mode = ParseLabelMode(header.at("label_mode").get<std::string>());
    ckpt.step = header.at("step").get<std::int64_t>();
  } catch (const Json::exception& e) {
    throw DataError("malformed checkpoint header: " + std::string(e.what()));
  }
  const auto count = ReadPod<std::uint64_t>(in, "parameter count");
  const Transformer shape(ckpt.model, ckpt.vocab.size());
  if (count != shape.params().size()) throw DataError("checkpoint parameter count does not match its config");
  ckpt.params.resize(count);
  in.read(reinterpret_cast<char*>(ckpt.params.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw DataError("truncated checkpoint parameters");
  return ckpt;
}

}  // namespace ctl
