#pragma once

#include "nac/tensor.hpp"

#include <functional>
#include <string>
#include <variant>
#include <vector>

namespace nac {

inline constexpr float kLeakySlope = 0.01f;
inline constexpr float kNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

enum class Act { kRelu, kGelu, kLeakyRelu, kNone };

const char* act_name(Act a);

/// What a parameter tensor is; drives optimizer, pruning and checkpointing.
/// kWeight tensors are the only maskable / quantizable ones. kBuffer holds
/// non-trained state (batch-norm running statistics).
enum class ParamKind { kWeight, kBias, kNormAffine, kBuffer };

using ParamVisitor =
    std::function<void(const char* name, Tensor& tensor, ParamKind kind)>;

namespace act_fn {
Eigen::ArrayXf apply(Act a, const Eigen::ArrayXf& x);
Eigen::ArrayXf deriv(Act a, const Eigen::ArrayXf& x);  // d act / d x at preact x
}  // namespace act_fn

// ---------------------------------------------------------------------------
// Layer variants. Each owns its parameters and the caches needed for the
// backward pass; forward(track=true) is required before backward.
// ---------------------------------------------------------------------------

struct Conv2dLayer {
  int in_ch = 0, out_ch = 0, kernel = 1;
  Tensor weight;  // [out_ch, in_ch*k*k]
  Tensor bias;    // [out_ch]

  Conv2dLayer(int in, int out, int k);
  std::vector<Index> out_shape(const std::vector<Index>& in) const;
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor& f);

  Tensor input_;
  bool has_cache_ = false;
};

struct LinearLayer {
  int in_dim = 0, out_dim = 0;
  Tensor weight;  // [out_dim, in_dim]
  Tensor bias;    // [out_dim]

  LinearLayer(int in, int out);
  std::vector<Index> out_shape(const std::vector<Index>& in) const;
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor& f);

  Tensor input_;
  bool has_cache_ = false;
};

/// Channel-wise normalization over the batch (and spatial dims when rank-4).
/// Accepts [B,C,H,W] or [B,C]. Normalizes with batch statistics in training
/// mode and with running statistics in eval mode.
struct BatchNormLayer {
  int channels = 0;
  Tensor gamma, beta;                 // [C]
  Tensor running_mean, running_var;   // [C], buffers

  explicit BatchNormLayer(int channels);
  std::vector<Index> out_shape(const std::vector<Index>& in) const;
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor& f);

  Eigen::ArrayXf xhat_, inv_std_;  // xhat full-size, inv_std per channel
  std::vector<Index> in_shape_;
  bool trained_mode_ = true;
  bool has_cache_ = false;
};

/// Per-sample normalization over all non-batch dims; the normalized shape
/// must equal the input shape minus the leading batch dim.
struct LayerNormLayer {
  std::vector<Index> norm_shape;
  Index group = 0;     // prod(norm_shape)
  Tensor gamma, beta;  // [group]

  explicit LayerNormLayer(std::vector<Index> shape);
  std::vector<Index> out_shape(const std::vector<Index>& in) const;
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor& f);

  Eigen::ArrayXf xhat_, inv_std_;  // xhat full-size, inv_std per row
  std::vector<Index> in_shape_;
  bool has_cache_ = false;
};

struct ReluLayer {
  std::vector<Index> out_shape(const std::vector<Index>& in) const { return in; }
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor&) {}
  Eigen::ArrayXf input_;
  bool has_cache_ = false;
};

struct GeluLayer {
  std::vector<Index> out_shape(const std::vector<Index>& in) const { return in; }
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor&) {}
  Eigen::ArrayXf input_;
  bool has_cache_ = false;
};

struct LeakyReluLayer {
  float slope = kLeakySlope;
  std::vector<Index> out_shape(const std::vector<Index>& in) const { return in; }
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor&) {}
  Eigen::ArrayXf input_;
  bool has_cache_ = false;
};

/// Softmax over the last dimension.
struct SoftmaxLayer {
  std::vector<Index> out_shape(const std::vector<Index>& in) const { return in; }
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor&) {}
  Tensor output_;
  bool has_cache_ = false;
};

/// Self-attention over the H*W spatial tokens with Q/K/V and the output
/// projection realized as 1x1 convolutions, plus a skip connection and a
/// skip activation. Preserves [B,C,H,W] end to end.
struct ConvAttentionLayer {
  int channels = 0, qkv_dim = 0;
  Act skip_act = Act::kNone;
  Tensor wq, wk, wv;  // [d, C]
  Tensor bq, bk, bv;  // [d]
  Tensor wp;          // [C, d]
  Tensor bp;          // [C]

  ConvAttentionLayer(int channels, int qkv_dim, Act skip_act);
  std::vector<Index> out_shape(const std::vector<Index>& in) const;
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor& f);

  Tensor input_, q_, k_, v_, attn_, ctx_, preact_;
  bool has_cache_ = false;
};

struct FlattenLayer {
  std::vector<Index> out_shape(const std::vector<Index>& in) const;
  Tensor forward(const Tensor& x, bool training, bool track);
  Tensor backward(const Tensor& gy);
  void for_each_param(const ParamVisitor&) {}
  std::vector<Index> in_shape_;
  bool has_cache_ = false;
};

using Layer = std::variant<Conv2dLayer, LinearLayer, BatchNormLayer,
                           LayerNormLayer, ReluLayer, GeluLayer, LeakyReluLayer,
                           SoftmaxLayer, ConvAttentionLayer, FlattenLayer>;

std::string layer_kind(const Layer& layer);
std::vector<Index> layer_out_shape(const Layer& layer,
                                   const std::vector<Index>& in);
Tensor layer_forward(Layer& layer, const Tensor& x, bool training, bool track);
Tensor layer_backward(Layer& layer, const Tensor& gy);
void layer_for_each_param(Layer& layer, const ParamVisitor& f);

}  // namespace nac
