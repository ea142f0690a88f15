#pragma once

#include "factorforge/codec.hpp"
#include "factorforge/errors.hpp"
#include "factorforge/rng.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace factorforge {

struct ModelConfig {
  int w_max = 10;
  int d_emb = 512;
  int encoder_layers = 4;
  int decoder_layers = 16;
  int heads = 16;
  int ffn_mult = 4;
  int max_len = 200;  // decoder positions, BOS and EOS included
  int encoder_vocab = 0;
  int decoder_vocab = 0;

  static ModelConfig paper();
  static ModelConfig toy(int w_max = 2);

  // Fills the vocabulary sizes implied by w_max.
  ModelConfig& with_vocab();
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

enum class TensorInit : std::uint8_t { Xavier, Embedding, Zeros, Ones };

struct TensorSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  TensorInit init = TensorInit::Zeros;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Named row-major tensors packed into one flat buffer, in a fixed order.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg);

  std::size_t size() const { return size_; }
  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  const TensorSpec& at(const std::string& name) const;

 private:
  std::vector<TensorSpec> tensors_;
  std::size_t size_ = 0;
};

std::size_t parameter_count(const ModelConfig& cfg);

namespace detail {
struct LinearRef {
  std::size_t w = 0, b = 0;
  int in = 0, out = 0;
};
struct NormRef {
  std::size_t gain = 0, bias = 0;
  int dim = 0;
};
struct AttentionRef {
  LinearRef q, k, v, o;
};
struct FfnRef {
  LinearRef up, down;
};
struct EncoderLayerRef {
  NormRef ln1;
  AttentionRef attn;
  NormRef ln2;
  FfnRef ffn;
};
struct DecoderLayerRef {
  NormRef ln1;
  AttentionRef self;
  NormRef ln2;
  AttentionRef cross;
  NormRef ln3;
  FfnRef ffn;
};
struct ModelRefs {
  std::size_t encoder_table = 0;
  LinearRef embed1, embed2;
  std::vector<EncoderLayerRef> encoder;
  NormRef encoder_norm;
  std::size_t decoder_table = 0;
  std::vector<DecoderLayerRef> decoder;
  NormRef decoder_norm;
  LinearRef head;
};
}  // namespace detail

// Parameter storage is over-aligned so vectorized kernels take the same path
// for every copy of a parameter vector.
template <class Scalar>
using ParamVector = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

// Embedder + pre-LN encoder/decoder transformer with explicit backward pass.
template <class Scalar>
class Transformer {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  explicit Transformer(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  ParamVector<Scalar>& params() { return params_; }
  const ParamVector<Scalar>& params() const { return params_; }

  void initialize(Rng& rng);

  // M x d_emb point embeddings. Throws DataError on ids outside the encoder
  // vocabulary or a grid of the wrong width.
  Matrix embed_bag(const TokenGrid& grid) const;
  // Encoder output (after the final layer norm).
  Matrix encode(const TokenGrid& grid) const;
  // Next-token logits for every position of `inputs`, which starts with BOS.
  // Throws std::length_error beyond max_len positions.
  Matrix logits(const TokenGrid& grid, std::span<const TokenId> inputs) const;

  struct SampleStats {
    double loss_sum = 0.0;  // summed cross-entropy over predicted tokens
    int tokens = 0;
    int correct = 0;  // argmax hits under teacher forcing
  };
  // Teacher-forced loss of `target` (BOS ... EOS). Adds
  // scale * d(loss_sum)/d(params) into `grads`.
  SampleStats accumulate_gradients(const TokenGrid& grid, std::span<const TokenId> target, Scalar scale,
                                   std::span<Scalar> grads) const;
  SampleStats evaluate(const TokenGrid& grid, std::span<const TokenId> target) const;

  // Incremental decoding: encoder memory with per-layer cross-attention keys
  // and values, plus a growing self-attention cache per hypothesis.
  struct Memory {
    Matrix encoded;
    std::vector<Matrix> keys, values;
  };
  struct Cache {
    std::vector<Matrix> keys, values;
    int length = 0;
  };
  Memory prepare(const TokenGrid& grid) const;
  Cache new_cache() const;
  // Feeds `token` at position cache.length and returns next-token logits.
  RowVector step(const Memory& memory, Cache& cache, TokenId token) const;

 private:
  struct Tape;
  Matrix forward(const TokenGrid& grid, std::span<const TokenId> inputs, Tape& tape) const;
  void backward(const Tape& tape, const Matrix& dlogits, std::span<const TokenId> inputs,
                Scalar* grads) const;

  ModelConfig cfg_;
  ParamLayout layout_;
  detail::ModelRefs refs_;
  ParamVector<Scalar> params_;
  Matrix positions_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace factorforge
