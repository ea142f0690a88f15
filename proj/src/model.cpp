#include "factorforge/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace factorforge {

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  return c.with_vocab();
}

ModelConfig ModelConfig::toy(int w_max) {
  ModelConfig c;
  c.w_max = w_max;
  c.d_emb = 64;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.heads = 4;
  c.max_len = 64;
  return c.with_vocab();
}

ModelConfig& ModelConfig::with_vocab() {
  const Vocabulary vocab(w_max);
  encoder_vocab = vocab.encoder_size();
  decoder_vocab = vocab.decoder_size();
  return *this;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
  if (w_max < 1) fail("w_max must be >= 1");
  if (d_emb < 1 || heads < 1) fail("d_emb and heads must be positive");
  if (d_emb % heads != 0) fail("d_emb must be divisible by heads");
  if (encoder_layers < 1) fail("encoder_layers must be >= 1");
  if (decoder_layers < encoder_layers) fail("decoder_layers must be >= encoder_layers");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (max_len < 3) fail("max_len must be >= 3");
  const Vocabulary vocab(w_max);
  if (encoder_vocab != vocab.encoder_size() || decoder_vocab != vocab.decoder_size())
    fail("vocabulary sizes do not match w_max");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  return {{"w_max", w_max},
          {"d_emb", d_emb},
          {"encoder_layers", encoder_layers},
          {"decoder_layers", decoder_layers},
          {"heads", heads},
          {"ffn_mult", ffn_mult},
          {"max_len", max_len},
          {"encoder_vocab", encoder_vocab},
          {"decoder_vocab", decoder_vocab}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.w_max = j.at("w_max").get<int>();
  c.d_emb = j.at("d_emb").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.encoder_vocab = j.at("encoder_vocab").get<int>();
  c.decoder_vocab = j.at("decoder_vocab").get<int>();
  return c;
}

// ---------------------------------------------------------------------------
// Layout

namespace {
// Builds the layout and the offsets used by the network in one pass.
struct LayoutBuilder {
  std::vector<TensorSpec>& tensors;
  std::size_t& size;

  std::size_t add(const std::string& name, int rows, int cols, TensorInit init) {
    TensorSpec t{name, rows, cols, size, init};
    size += t.size();
    tensors.push_back(t);
    return t.offset;
  }
  detail::LinearRef linear(const std::string& name, int in, int out, TensorInit init = TensorInit::Xavier) {
    detail::LinearRef r;
    r.in = in;
    r.out = out;
    r.w = add(name + ".weight", in, out, init);
    r.b = add(name + ".bias", 1, out, TensorInit::Zeros);
    return r;
  }
  detail::NormRef norm(const std::string& name, int dim) {
    detail::NormRef r;
    r.dim = dim;
    r.gain = add(name + ".gain", 1, dim, TensorInit::Ones);
    r.bias = add(name + ".bias", 1, dim, TensorInit::Zeros);
    return r;
  }
  detail::AttentionRef attention(const std::string& name, int d) {
    return {linear(name + ".q", d, d), linear(name + ".k", d, d), linear(name + ".v", d, d),
            linear(name + ".o", d, d)};
  }
  detail::FfnRef ffn(const std::string& name, int d, int hidden) {
    return {linear(name + ".up", d, hidden), linear(name + ".down", hidden, d)};
  }
};

detail::ModelRefs build_layout(const ModelConfig& cfg, std::vector<TensorSpec>& tensors, std::size_t& size) {
  LayoutBuilder b{tensors, size};
  const int d = cfg.d_emb;
  const int hidden = d * cfg.ffn_mult;
  detail::ModelRefs r;
  r.encoder_table = b.add("embedder.table", cfg.encoder_vocab, d, TensorInit::Embedding);
  r.embed1 = b.linear("embedder.fc1", grid_width(cfg.w_max) * d, d);
  r.embed2 = b.linear("embedder.fc2", d, d);
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    r.encoder.push_back({b.norm(p + ".ln1", d), b.attention(p + ".attn", d), b.norm(p + ".ln2", d),
                         b.ffn(p + ".ffn", d, hidden)});
  }
  r.encoder_norm = b.norm("encoder.norm", d);
  r.decoder_table = b.add("decoder.table", cfg.decoder_vocab, d, TensorInit::Embedding);
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    detail::DecoderLayerRef layer;
    layer.ln1 = b.norm(p + ".ln1", d);
    layer.self = b.attention(p + ".self", d);
    layer.ln2 = b.norm(p + ".ln2", d);
    layer.cross = b.attention(p + ".cross", d);
    layer.ln3 = b.norm(p + ".ln3", d);
    layer.ffn = b.ffn(p + ".ffn", d, hidden);
    r.decoder.push_back(layer);
  }
  r.decoder_norm = b.norm("decoder.norm", d);
  r.head = b.linear("head", d, cfg.decoder_vocab, TensorInit::Zeros);
  return r;
}

}  // namespace

ParamLayout::ParamLayout(const ModelConfig& cfg) { build_layout(cfg, tensors_, size_); }

const TensorSpec& ParamLayout::at(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw std::out_of_range("no tensor named " + name);
}

std::size_t parameter_count(const ModelConfig& cfg) { return ParamLayout(cfg).size(); }

// ---------------------------------------------------------------------------
// Layers

namespace {

constexpr double kNormEps = 1e-5;

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <class S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using CMap = Eigen::Map<const Mat<S>>;
template <class S>
using MMap = Eigen::Map<Mat<S>>;
template <class S>
using CVec = Eigen::Map<const RowVec<S>>;
template <class S>
using MVec = Eigen::Map<RowVec<S>>;

template <class S>
Mat<S> linear(const S* p, const detail::LinearRef& r, const Mat<S>& x) {
  Mat<S> y = x * CMap<S>(p + r.w, r.in, r.out);
  y.rowwise() += CVec<S>(p + r.b, r.out);
  return y;
}

template <class S>
Mat<S> linear_backward(const S* p, S* g, const detail::LinearRef& r, const Mat<S>& x, const Mat<S>& dy) {
  MMap<S>(g + r.w, r.in, r.out).noalias() += x.transpose() * dy;
  MVec<S>(g + r.b, r.out) += dy.colwise().sum();
  return dy * CMap<S>(p + r.w, r.in, r.out).transpose();
}

template <class S>
struct NormCache {
  Mat<S> xhat;
  ColVec<S> rstd;
};

template <class S>
Mat<S> layer_norm(const S* p, const detail::NormRef& r, const Mat<S>& x, NormCache<S>* cache) {
  const Eigen::Index n = x.rows();
  Mat<S> xhat(n, x.cols());
  ColVec<S> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const auto centered = (x.row(i).array() - mean).eval();
    const S var = centered.square().mean();
    rstd[i] = S(1) / std::sqrt(var + S(kNormEps));
    xhat.row(i) = centered * rstd[i];
  }
  Mat<S> y = (xhat.array().rowwise() * CVec<S>(p + r.gain, r.dim).array()).matrix();
  y.rowwise() += CVec<S>(p + r.bias, r.dim);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <class S>
Mat<S> layer_norm_backward(const S* p, S* g, const detail::NormRef& r, const NormCache<S>& c, const Mat<S>& dy) {
  MVec<S>(g + r.gain, r.dim) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  MVec<S>(g + r.bias, r.dim) += dy.colwise().sum();
  const Mat<S> dxhat = (dy.array().rowwise() * CVec<S>(p + r.gain, r.dim).array()).matrix();
  Mat<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const S mean_d = dxhat.row(i).mean();
    const S mean_dx = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
    dx.row(i) = c.rstd[i] * (dxhat.row(i).array() - mean_d - c.xhat.row(i).array() * mean_dx).matrix();
  }
  return dx;
}

// Scaled dot-product attention of q over the first `nk` rows of k and v.
// With `causal`, query i sees keys j <= i + (nk - nq).
template <class S>
Mat<S> attend(const Mat<S>& q, const Mat<S>& k, const Mat<S>& v, Eigen::Index nk, int heads, bool causal,
              std::vector<Mat<S>>* probs) {
  const Eigen::Index nq = q.rows();
  const Eigen::Index d = q.cols();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const Eigen::Index offset = nk - nq;
  Mat<S> out(nq, d);
  if (probs) probs->resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Mat<S> s = (q.middleCols(h * dh, dh) * k.topRows(nk).middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index i = 0; i < nq; ++i) {
      const Eigen::Index visible = causal ? std::min(nk, i + offset + 1) : nk;
      auto row = s.row(i);
      const S mx = row.head(visible).maxCoeff();
      row.head(visible) = (row.head(visible).array() - mx).exp().matrix();
      row.head(visible) /= row.head(visible).sum();
      if (visible < nk) row.tail(nk - visible).setZero();
    }
    out.middleCols(h * dh, dh).noalias() = s * v.topRows(nk).middleCols(h * dh, dh);
    if (probs) (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }
  return out;
}

template <class S>
struct AttentionCache {
  Mat<S> xq, xkv, q, k, v, mixed;
  std::vector<Mat<S>> probs;
};

template <class S>
Mat<S> attention(const S* p, const detail::AttentionRef& r, int heads, const Mat<S>& xq, const Mat<S>& xkv,
                 bool causal, AttentionCache<S>& c) {
  c.xq = xq;
  c.xkv = xkv;
  c.q = linear(p, r.q, xq);
  c.k = linear(p, r.k, xkv);
  c.v = linear(p, r.v, xkv);
  c.mixed = attend(c.q, c.k, c.v, c.k.rows(), heads, causal, &c.probs);
  return linear(p, r.o, c.mixed);
}

// Returns (d xq, d xkv).
template <class S>
std::pair<Mat<S>, Mat<S>> attention_backward(const S* p, S* g, const detail::AttentionRef& r, int heads,
                                             const AttentionCache<S>& c, const Mat<S>& dy) {
  const Mat<S> dmixed = linear_backward(p, g, r.o, c.mixed, dy);
  const Eigen::Index d = c.q.cols();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Mat<S> dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const Mat<S>& prob = c.probs[static_cast<std::size_t>(h)];
    const auto dout = dmixed.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh).noalias() = prob.transpose() * dout;
    Mat<S> dp = dout * c.v.middleCols(h * dh, dh).transpose();
    const ColVec<S> dot = (dp.array() * prob.array()).rowwise().sum();
    Mat<S> ds = (prob.array() * (dp.colwise() - dot).array()).matrix() * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  Mat<S> dxq = linear_backward(p, g, r.q, c.xq, dq);
  Mat<S> dxkv = linear_backward(p, g, r.k, c.xkv, dk);
  dxkv += linear_backward(p, g, r.v, c.xkv, dv);
  return {std::move(dxq), std::move(dxkv)};
}

template <class S>
struct FfnCache {
  Mat<S> x, hidden;
};

template <class S>
Mat<S> feed_forward(const S* p, const detail::FfnRef& r, const Mat<S>& x, FfnCache<S>* c) {
  Mat<S> hidden = linear(p, r.up, x).cwiseMax(S(0));
  Mat<S> y = linear(p, r.down, hidden);
  if (c) {
    c->x = x;
    c->hidden = std::move(hidden);
  }
  return y;
}

template <class S>
Mat<S> feed_forward_backward(const S* p, S* g, const detail::FfnRef& r, const FfnCache<S>& c, const Mat<S>& dy) {
  Mat<S> dh = linear_backward(p, g, r.down, c.hidden, dy);
  dh = (c.hidden.array() > S(0)).select(dh, S(0));
  return linear_backward(p, g, r.up, c.x, dh);
}

template <class S>
Mat<S> embed_points(const S* p, const detail::ModelRefs& refs, const ModelConfig& cfg, const TokenGrid& grid,
                    Mat<S>& concat, Mat<S>& hidden) {
  const int d = cfg.d_emb;
  const int width = grid_width(cfg.w_max);
  if (grid.width != width || grid.ids.size() != static_cast<std::size_t>(grid.rows) * width)
    throw DataError("point grid width " + std::to_string(grid.width) + " does not match the model (" +
                    std::to_string(width) + ")");
  concat.resize(grid.rows, static_cast<Eigen::Index>(width) * d);
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < width; ++c) {
      const TokenId id = grid.ids[static_cast<std::size_t>(r) * width + c];
      if (id < 0 || id >= cfg.encoder_vocab)
        throw DataError("encoder token id " + std::to_string(id) + " outside the vocabulary");
      concat.row(r).segment(static_cast<Eigen::Index>(c) * d, d) =
          CVec<S>(p + refs.encoder_table + static_cast<std::size_t>(id) * d, d);
    }
  hidden = linear(p, refs.embed1, concat).cwiseMax(S(0));
  return linear(p, refs.embed2, hidden);
}

}  // namespace

// ---------------------------------------------------------------------------
// Transformer

template <class Scalar>
struct Transformer<Scalar>::Tape {
  struct EncoderLayer {
    NormCache<Scalar> ln1, ln2;
    AttentionCache<Scalar> attn;
    FfnCache<Scalar> ffn;
  };
  struct DecoderLayer {
    NormCache<Scalar> ln1, ln2, ln3;
    AttentionCache<Scalar> self, cross;
    FfnCache<Scalar> ffn;
  };
  std::vector<TokenId> grid_ids;
  int grid_rows = 0;
  Mat<Scalar> concat, hidden;
  std::vector<EncoderLayer> encoder;
  NormCache<Scalar> encoder_norm;
  Mat<Scalar> memory;
  std::vector<DecoderLayer> decoder;
  NormCache<Scalar> decoder_norm;
  Mat<Scalar> final;
};

template <class Scalar>
Transformer<Scalar>::Transformer(ModelConfig cfg) : cfg_(std::move(cfg)), layout_(cfg_) {
  cfg_.validate();
  std::vector<TensorSpec> unused;
  std::size_t size = 0;
  refs_ = build_layout(cfg_, unused, size);
  params_.assign(layout_.size(), Scalar(0));
  const int d = cfg_.d_emb;
  positions_.resize(cfg_.max_len, d);
  for (int pos = 0; pos < cfg_.max_len; ++pos)
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      positions_(pos, i) = static_cast<Scalar>(std::sin(pos * freq));
      if (i + 1 < d) positions_(pos, i + 1) = static_cast<Scalar>(std::cos(pos * freq));
    }
}

template <class Scalar>
void Transformer<Scalar>::initialize(Rng& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (const auto& t : layout_.tensors()) {
    Scalar* p = params_.data() + t.offset;
    double bound = 0.0;
    switch (t.init) {
      case TensorInit::Zeros:
        std::fill(p, p + t.size(), Scalar(0));
        continue;
      case TensorInit::Ones:
        std::fill(p, p + t.size(), Scalar(1));
        continue;
      case TensorInit::Xavier:
        bound = std::sqrt(6.0 / (t.rows + t.cols));
        break;
      case TensorInit::Embedding:
        bound = std::sqrt(3.0);  // unit variance
        break;
    }
    for (std::size_t i = 0; i < t.size(); ++i) p[i] = static_cast<Scalar>(bound * unit(rng));
  }
}

template <class Scalar>
typename Transformer<Scalar>::Matrix Transformer<Scalar>::embed_bag(const TokenGrid& grid) const {
  Mat<Scalar> concat, hidden;
  return embed_points(params_.data(), refs_, cfg_, grid, concat, hidden);
}

template <class Scalar>
typename Transformer<Scalar>::Matrix Transformer<Scalar>::forward(const TokenGrid& grid,
                                                                  std::span<const TokenId> inputs,
                                                                  Tape& tape) const {
  const Scalar* p = params_.data();
  const int d = cfg_.d_emb;
  if (inputs.empty()) throw std::invalid_argument("decoder input is empty");
  if (static_cast<int>(inputs.size()) > cfg_.max_len)
    throw std::length_error("sequence of " + std::to_string(inputs.size()) + " positions exceeds max_len " +
                            std::to_string(cfg_.max_len));

  tape.grid_ids = grid.ids;
  tape.grid_rows = grid.rows;
  Mat<Scalar> x = embed_points(p, refs_, cfg_, grid, tape.concat, tape.hidden);

  tape.encoder.resize(refs_.encoder.size());
  for (std::size_t l = 0; l < refs_.encoder.size(); ++l) {
    const auto& r = refs_.encoder[l];
    auto& c = tape.encoder[l];
    const Mat<Scalar> h1 = layer_norm(p, r.ln1, x, &c.ln1);
    x += attention(p, r.attn, cfg_.heads, h1, h1, false, c.attn);
    const Mat<Scalar> h2 = layer_norm(p, r.ln2, x, &c.ln2);
    x += feed_forward(p, r.ffn, h2, &c.ffn);
  }
  tape.memory = layer_norm(p, refs_.encoder_norm, x, &tape.encoder_norm);

  const auto n = static_cast<Eigen::Index>(inputs.size());
  Mat<Scalar> y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId id = inputs[static_cast<std::size_t>(i)];
    if (id < 0 || id >= cfg_.decoder_vocab)
      throw DataError("decoder token id " + std::to_string(id) + " outside the vocabulary");
    y.row(i) = CVec<Scalar>(p + refs_.decoder_table + static_cast<std::size_t>(id) * d, d) + positions_.row(i);
  }
  tape.decoder.resize(refs_.decoder.size());
  for (std::size_t l = 0; l < refs_.decoder.size(); ++l) {
    const auto& r = refs_.decoder[l];
    auto& c = tape.decoder[l];
    const Mat<Scalar> h1 = layer_norm(p, r.ln1, y, &c.ln1);
    y += attention(p, r.self, cfg_.heads, h1, h1, true, c.self);
    const Mat<Scalar> h2 = layer_norm(p, r.ln2, y, &c.ln2);
    y += attention(p, r.cross, cfg_.heads, h2, tape.memory, false, c.cross);
    const Mat<Scalar> h3 = layer_norm(p, r.ln3, y, &c.ln3);
    y += feed_forward(p, r.ffn, h3, &c.ffn);
  }
  tape.final = layer_norm(p, refs_.decoder_norm, y, &tape.decoder_norm);
  return linear(p, refs_.head, tape.final);
}

template <class Scalar>
void Transformer<Scalar>::backward(const Tape& tape, const Matrix& dlogits, std::span<const TokenId> inputs,
                                   Scalar* g) const {
  const Scalar* p = params_.data();
  const int d = cfg_.d_emb;
  Mat<Scalar> dy = linear_backward(p, g, refs_.head, tape.final, dlogits);
  dy = layer_norm_backward(p, g, refs_.decoder_norm, tape.decoder_norm, dy);
  Mat<Scalar> dmemory = Mat<Scalar>::Zero(tape.memory.rows(), d);
  for (std::size_t l = refs_.decoder.size(); l-- > 0;) {
    const auto& r = refs_.decoder[l];
    const auto& c = tape.decoder[l];
    dy += layer_norm_backward(p, g, r.ln3, c.ln3, feed_forward_backward(p, g, r.ffn, c.ffn, dy));
    auto [dq, dkv] = attention_backward(p, g, r.cross, cfg_.heads, c.cross, dy);
    dmemory += dkv;
    dy += layer_norm_backward(p, g, r.ln2, c.ln2, dq);
    auto [sq, skv] = attention_backward(p, g, r.self, cfg_.heads, c.self, dy);
    sq += skv;
    dy += layer_norm_backward(p, g, r.ln1, c.ln1, sq);
  }
  for (std::size_t i = 0; i < inputs.size(); ++i)
    MVec<Scalar>(g + refs_.decoder_table + static_cast<std::size_t>(inputs[i]) * d, d) +=
        dy.row(static_cast<Eigen::Index>(i));

  Mat<Scalar> dx = layer_norm_backward(p, g, refs_.encoder_norm, tape.encoder_norm, dmemory);
  for (std::size_t l = refs_.encoder.size(); l-- > 0;) {
    const auto& r = refs_.encoder[l];
    const auto& c = tape.encoder[l];
    dx += layer_norm_backward(p, g, r.ln2, c.ln2, feed_forward_backward(p, g, r.ffn, c.ffn, dx));
    auto [dq, dkv] = attention_backward(p, g, r.attn, cfg_.heads, c.attn, dx);
    dq += dkv;
    dx += layer_norm_backward(p, g, r.ln1, c.ln1, dq);
  }
  Mat<Scalar> dh = linear_backward(p, g, refs_.embed2, tape.hidden, dx);
  dh = (tape.hidden.array() > Scalar(0)).select(dh, Scalar(0));
  const Mat<Scalar> dconcat = linear_backward(p, g, refs_.embed1, tape.concat, dh);
  const int width = grid_width(cfg_.w_max);
  for (int r = 0; r < tape.grid_rows; ++r)
    for (int c = 0; c < width; ++c) {
      const TokenId id = tape.grid_ids[static_cast<std::size_t>(r) * width + c];
      MVec<Scalar>(g + refs_.encoder_table + static_cast<std::size_t>(id) * d, d) +=
          dconcat.row(r).segment(static_cast<Eigen::Index>(c) * d, d);
    }
}

template <class Scalar>
typename Transformer<Scalar>::Matrix Transformer<Scalar>::encode(const TokenGrid& grid) const {
  const Scalar* p = params_.data();
  Mat<Scalar> x = embed_bag(grid);
  for (const auto& r : refs_.encoder) {
    AttentionCache<Scalar> c;
    const Mat<Scalar> h1 = layer_norm<Scalar>(p, r.ln1, x, nullptr);
    x += attention(p, r.attn, cfg_.heads, h1, h1, false, c);
    const Mat<Scalar> h2 = layer_norm<Scalar>(p, r.ln2, x, nullptr);
    x += feed_forward<Scalar>(p, r.ffn, h2, nullptr);
  }
  return layer_norm<Scalar>(p, refs_.encoder_norm, x, nullptr);
}

template <class Scalar>
typename Transformer<Scalar>::Matrix Transformer<Scalar>::logits(const TokenGrid& grid,
                                                                 std::span<const TokenId> inputs) const {
  Tape tape;
  return forward(grid, inputs, tape);
}

namespace {

// Row-wise log-softmax cross-entropy. Writes softmax - onehot into `dlogits`
// when given.
template <class S>
void cross_entropy(const Mat<S>& logits, std::span<const TokenId> targets, double& loss, int& correct,
                   Mat<S>* dlogits, S scale) {
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    Eigen::Index arg = 0;
    const S mx = row.maxCoeff(&arg);
    const auto shifted = (row.array() - mx).eval();
    const S sum = shifted.exp().sum();
    const S lse = std::log(sum);
    const TokenId t = targets[static_cast<std::size_t>(i)];
    loss += static_cast<double>(lse - shifted[t]);
    correct += arg == t;
    if (dlogits) {
      dlogits->row(i) = (shifted.exp() / sum).matrix() * scale;
      (*dlogits)(i, t) -= scale;
    }
  }
}

}  // namespace

template <class Scalar>
typename Transformer<Scalar>::SampleStats Transformer<Scalar>::accumulate_gradients(
    const TokenGrid& grid, std::span<const TokenId> target, Scalar scale, std::span<Scalar> grads) const {
  if (target.size() < 2) throw std::invalid_argument("target needs at least BOS and one token");
  if (grads.size() != params_.size()) throw std::invalid_argument("gradient buffer size mismatch");
  const auto inputs = target.first(target.size() - 1);
  Tape tape;
  const Mat<Scalar> out = forward(grid, inputs, tape);
  SampleStats s;
  s.tokens = static_cast<int>(inputs.size());
  Mat<Scalar> dlogits;
  cross_entropy(out, target.subspan(1), s.loss_sum, s.correct, &dlogits, scale);
  backward(tape, dlogits, inputs, grads.data());
  return s;
}

template <class Scalar>
typename Transformer<Scalar>::SampleStats Transformer<Scalar>::evaluate(const TokenGrid& grid,
                                                                        std::span<const TokenId> target) const {
  if (target.size() < 2) throw std::invalid_argument("target needs at least BOS and one token");
  const auto inputs = target.first(target.size() - 1);
  const Mat<Scalar> out = logits(grid, inputs);
  SampleStats s;
  s.tokens = static_cast<int>(inputs.size());
  cross_entropy<Scalar>(out, target.subspan(1), s.loss_sum, s.correct, nullptr, Scalar(1));
  return s;
}

template <class Scalar>
typename Transformer<Scalar>::Memory Transformer<Scalar>::prepare(const TokenGrid& grid) const {
  const Scalar* p = params_.data();
  Memory m;
  m.encoded = encode(grid);
  for (const auto& r : refs_.decoder) {
    m.keys.push_back(linear(p, r.cross.k, m.encoded));
    m.values.push_back(linear(p, r.cross.v, m.encoded));
  }
  return m;
}

template <class Scalar>
typename Transformer<Scalar>::Cache Transformer<Scalar>::new_cache() const {
  Cache c;
  for (std::size_t l = 0; l < refs_.decoder.size(); ++l) {
    c.keys.emplace_back(cfg_.max_len, cfg_.d_emb);
    c.values.emplace_back(cfg_.max_len, cfg_.d_emb);
  }
  return c;
}

template <class Scalar>
typename Transformer<Scalar>::RowVector Transformer<Scalar>::step(const Memory& memory, Cache& cache,
                                                                  TokenId token) const {
  const Scalar* p = params_.data();
  const int d = cfg_.d_emb;
  if (cache.length >= cfg_.max_len) throw std::length_error("decoder cache is full");
  if (token < 0 || token >= cfg_.decoder_vocab) throw DataError("decoder token id outside the vocabulary");
  const Eigen::Index pos = cache.length;
  Mat<Scalar> y = CVec<Scalar>(p + refs_.decoder_table + static_cast<std::size_t>(token) * d, d) +
                  positions_.row(pos);
  for (std::size_t l = 0; l < refs_.decoder.size(); ++l) {
    const auto& r = refs_.decoder[l];
    const Mat<Scalar> h1 = layer_norm<Scalar>(p, r.ln1, y, nullptr);
    const Mat<Scalar> q = linear(p, r.self.q, h1);
    cache.keys[l].row(pos) = linear(p, r.self.k, h1);
    cache.values[l].row(pos) = linear(p, r.self.v, h1);
    const Mat<Scalar> mixed = attend<Scalar>(q, cache.keys[l], cache.values[l], pos + 1, cfg_.heads, false, nullptr);
    y += linear(p, r.self.o, mixed);
    const Mat<Scalar> h2 = layer_norm<Scalar>(p, r.ln2, y, nullptr);
    const Mat<Scalar> cq = linear(p, r.cross.q, h2);
    const Mat<Scalar> cross = attend<Scalar>(cq, memory.keys[l], memory.values[l], memory.keys[l].rows(),
                                             cfg_.heads, false, nullptr);
    y += linear(p, r.cross.o, cross);
    const Mat<Scalar> h3 = layer_norm<Scalar>(p, r.ln3, y, nullptr);
    y += feed_forward<Scalar>(p, r.ffn, h3, nullptr);
  }
  ++cache.length;
  return linear(p, refs_.head, layer_norm<Scalar>(p, refs_.decoder_norm, y, nullptr));
}

template class Transformer<float>;
template class Transformer<double>;

}  // namespace factorforge
