#include "nac/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace nac {

namespace {

using Eigen::ArrayXf;
using MatRM = Tensor::MatrixRM;
using MapRM = Tensor::MapRM;
using ConstMapRM = Tensor::ConstMapRM;

constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;

void require_rank4(const std::vector<Index>& s, const char* who) {
  if (s.size() != 4) {
    throw std::invalid_argument(std::string(who) + ": expected rank-4 input, got " +
                                shape_string(s));
  }
}

// Unfolds one batch element into a (in_ch*k*k) x (H'*W') patch matrix.
void im2col(const float* x, Index C, Index H, Index W, Index k, MatRM& cols) {
  const Index Ho = H - k + 1, Wo = W - k + 1;
  for (Index c = 0; c < C; ++c) {
    const float* xc = x + c * H * W;
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        float* row = cols.data() + ((c * k + ki) * k + kj) * (Ho * Wo);
        for (Index oh = 0; oh < Ho; ++oh) {
          const float* src = xc + (oh + ki) * W + kj;
          std::copy(src, src + Wo, row + oh * Wo);
        }
      }
    }
  }
}

void col2im_add(const MatRM& cols, Index C, Index H, Index W, Index k,
                float* dx) {
  const Index Ho = H - k + 1, Wo = W - k + 1;
  for (Index c = 0; c < C; ++c) {
    float* xc = dx + c * H * W;
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        const float* row = cols.data() + ((c * k + ki) * k + kj) * (Ho * Wo);
        for (Index oh = 0; oh < Ho; ++oh) {
          float* dst = xc + (oh + ki) * W + kj;
          for (Index ow = 0; ow < Wo; ++ow) dst[ow] += row[oh * Wo + ow];
        }
      }
    }
  }
}

void check_cache(bool has, const char* who) {
  if (!has) {
    throw std::logic_error(std::string(who) +
                           ": backward called without a tracked forward");
  }
}

}  // namespace

const char* act_name(Act a) {
  switch (a) {
    case Act::kRelu: return "relu";
    case Act::kGelu: return "gelu";
    case Act::kLeakyRelu: return "leaky_relu";
    case Act::kNone: return "none";
  }
  return "none";
}

namespace act_fn {

Eigen::ArrayXf apply(Act a, const Eigen::ArrayXf& x) {
  switch (a) {
    case Act::kRelu:
      return x.max(0.0f);
    case Act::kGelu:
      return 0.5f * x * (1.0f + (x * kInvSqrt2).erf());
    case Act::kLeakyRelu:
      return (x > 0.0f).select(x, kLeakySlope * x);
    case Act::kNone:
      return x;
  }
  return x;
}

Eigen::ArrayXf deriv(Act a, const Eigen::ArrayXf& x) {
  switch (a) {
    case Act::kRelu:
      return (x > 0.0f).cast<float>();
    case Act::kGelu:
      return 0.5f * (1.0f + (x * kInvSqrt2).erf()) +
             x * kInvSqrt2Pi * (-0.5f * x.square()).exp();
    case Act::kLeakyRelu:
      return (x > 0.0f).select(Eigen::ArrayXf::Ones(x.size()),
                               Eigen::ArrayXf::Constant(x.size(), kLeakySlope));
    case Act::kNone:
      return Eigen::ArrayXf::Ones(x.size());
  }
  return Eigen::ArrayXf::Ones(x.size());
}

}  // namespace act_fn

// --------------------------------------------------------------------------
// Conv2d (valid convolution, stride 1)
// --------------------------------------------------------------------------

Conv2dLayer::Conv2dLayer(int in, int out, int k)
    : in_ch(in), out_ch(out), kernel(k),
      weight({out, static_cast<Index>(in) * k * k}),
      bias({out}) {
  if (k != 1 && k != 3) throw std::invalid_argument("conv2d: kernel must be 1 or 3");
  if (in <= 0 || out <= 0) throw std::invalid_argument("conv2d: bad channels");
  weight.require_grad();
  bias.require_grad();
}

std::vector<Index> Conv2dLayer::out_shape(const std::vector<Index>& in) const {
  require_rank4(in, "conv2d");
  if (in[1] != in_ch) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(in[1]) +
                                " != expected " + std::to_string(in_ch));
  }
  const Index ho = in[2] - kernel + 1, wo = in[3] - kernel + 1;
  if (ho < 1 || wo < 1) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kernel) +
                                " underflows spatial size " + shape_string(in));
  }
  return {in[0], out_ch, ho, wo};
}

Tensor Conv2dLayer::forward(const Tensor& x, bool /*training*/, bool track) {
  const auto os = out_shape(x.shape());
  const Index B = x.dim(0), H = x.dim(2), W = x.dim(3);
  const Index Ho = os[2], Wo = os[3], P = Ho * Wo;
  const Index ckk = static_cast<Index>(in_ch) * kernel * kernel;

  Tensor y(os);
  MatRM cols(ckk, P);
  auto wmat = weight.mat(out_ch, ckk);
  for (Index b = 0; b < B; ++b) {
    im2col(x.data() + b * in_ch * H * W, in_ch, H, W, kernel, cols);
    MapRM yb(y.data() + b * out_ch * P, out_ch, P);
    yb.noalias() = wmat * cols;
    yb.colwise() += Eigen::Map<const Eigen::VectorXf>(bias.data(), out_ch);
  }
  if (track) {
    input_ = x;
    has_cache_ = true;
  }
  return y;
}

Tensor Conv2dLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "conv2d");
  const Index B = input_.dim(0), H = input_.dim(2), W = input_.dim(3);
  const Index Ho = H - kernel + 1, Wo = W - kernel + 1, P = Ho * Wo;
  const Index ckk = static_cast<Index>(in_ch) * kernel * kernel;

  Tensor dx(input_.shape());
  MatRM cols(ckk, P);
  MatRM dcols(ckk, P);
  auto wmat = weight.mat(out_ch, ckk);
  auto dwmat = weight.grad_mat(out_ch, ckk);
  Eigen::Map<Eigen::VectorXf> db(bias.grad().data(), out_ch);
  for (Index b = 0; b < B; ++b) {
    ConstMapRM gyb(gy.data() + b * out_ch * P, out_ch, P);
    im2col(input_.data() + b * in_ch * H * W, in_ch, H, W, kernel, cols);
    dwmat.noalias() += gyb * cols.transpose();
    db.noalias() += gyb.rowwise().sum();
    dcols.noalias() = wmat.transpose() * gyb;
    col2im_add(dcols, in_ch, H, W, kernel, dx.data() + b * in_ch * H * W);
  }
  return dx;
}

void Conv2dLayer::for_each_param(const ParamVisitor& f) {
  f("weight", weight, ParamKind::kWeight);
  f("bias", bias, ParamKind::kBias);
}

// --------------------------------------------------------------------------
// Linear
// --------------------------------------------------------------------------

LinearLayer::LinearLayer(int in, int out)
    : in_dim(in), out_dim(out), weight({out, in}), bias({out}) {
  if (in <= 0 || out <= 0) throw std::invalid_argument("linear: bad dims");
  weight.require_grad();
  bias.require_grad();
}

std::vector<Index> LinearLayer::out_shape(const std::vector<Index>& in) const {
  if (in.size() != 2 || in[1] != in_dim) {
    throw std::invalid_argument("linear: expected [B," + std::to_string(in_dim) +
                                "], got " + shape_string(in));
  }
  return {in[0], out_dim};
}

Tensor LinearLayer::forward(const Tensor& x, bool /*training*/, bool track) {
  const auto os = out_shape(x.shape());
  const Index B = x.dim(0);
  Tensor y(os);
  y.mat(B, out_dim).noalias() = x.mat(B, in_dim) * weight.mat(out_dim, in_dim).transpose();
  y.mat(B, out_dim).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXf>(bias.data(), out_dim);
  if (track) {
    input_ = x;
    has_cache_ = true;
  }
  return y;
}

Tensor LinearLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "linear");
  const Index B = input_.dim(0);
  auto gym = gy.mat(B, out_dim);
  weight.grad_mat(out_dim, in_dim).noalias() += gym.transpose() * input_.mat(B, in_dim);
  Eigen::Map<Eigen::RowVectorXf>(bias.grad().data(), out_dim) += gym.colwise().sum();
  Tensor dx(input_.shape());
  dx.mat(B, in_dim).noalias() = gym * weight.mat(out_dim, in_dim);
  return dx;
}

void LinearLayer::for_each_param(const ParamVisitor& f) {
  f("weight", weight, ParamKind::kWeight);
  f("bias", bias, ParamKind::kBias);
}

// --------------------------------------------------------------------------
// BatchNorm
// --------------------------------------------------------------------------

BatchNormLayer::BatchNormLayer(int ch)
    : channels(ch), gamma({ch}), beta({ch}), running_mean({ch}), running_var({ch}) {
  gamma.arr().setOnes();
  running_var.arr().setOnes();
  gamma.require_grad();
  beta.require_grad();
}

std::vector<Index> BatchNormLayer::out_shape(const std::vector<Index>& in) const {
  if ((in.size() != 4 && in.size() != 2) || in[1] != channels) {
    throw std::invalid_argument("batch_norm: expected [B," + std::to_string(channels) +
                                ",...], got " + shape_string(in));
  }
  return in;
}

Tensor BatchNormLayer::forward(const Tensor& x, bool training, bool track) {
  out_shape(x.shape());
  const Index B = x.dim(0), C = channels;
  const Index S = x.numel() / (B * C);
  const double n = static_cast<double>(B) * S;

  Eigen::ArrayXd mean(C), var(C);
  if (training) {
    for (Index c = 0; c < C; ++c) {
      double sum = 0.0, sum2 = 0.0;
      for (Index b = 0; b < B; ++b) {
        auto seg = x.arr().segment((b * C + c) * S, S).cast<double>();
        sum += seg.sum();
        sum2 += seg.square().sum();
      }
      mean[c] = sum / n;
      var[c] = std::max(0.0, sum2 / n - mean[c] * mean[c]);
    }
    const double unbias = n > 1 ? n / (n - 1.0) : 1.0;
    for (Index c = 0; c < C; ++c) {
      running_mean[c] = (1.0f - kBatchNormMomentum) * running_mean[c] +
                        kBatchNormMomentum * static_cast<float>(mean[c]);
      running_var[c] = (1.0f - kBatchNormMomentum) * running_var[c] +
                       kBatchNormMomentum * static_cast<float>(var[c] * unbias);
    }
  } else {
    for (Index c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }

  Eigen::ArrayXf inv_std =
      (var.cast<float>() + kNormEps).sqrt().inverse();
  Tensor y(x.shape());
  Eigen::ArrayXf xhat(x.numel());
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < C; ++c) {
      const Index off = (b * C + c) * S;
      xhat.segment(off, S) =
          (x.arr().segment(off, S) - static_cast<float>(mean[c])) * inv_std[c];
      y.arr().segment(off, S) = gamma[c] * xhat.segment(off, S) + beta[c];
    }
  }
  if (track) {
    xhat_ = std::move(xhat);
    inv_std_ = std::move(inv_std);
    in_shape_ = x.shape();
    trained_mode_ = training;
    has_cache_ = true;
  }
  return y;
}

Tensor BatchNormLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "batch_norm");
  const Index B = in_shape_[0], C = channels;
  const Index S = gy.numel() / (B * C);
  const float n = static_cast<float>(B * S);

  Tensor dx(in_shape_);
  for (Index c = 0; c < C; ++c) {
    double s1 = 0.0, s2 = 0.0;
    for (Index b = 0; b < B; ++b) {
      const Index off = (b * C + c) * S;
      auto g = gy.arr().segment(off, S);
      s1 += g.cast<double>().sum();
      s2 += (g * xhat_.segment(off, S)).cast<double>().sum();
    }
    gamma.grad()[c] += static_cast<float>(s2);
    beta.grad()[c] += static_cast<float>(s1);
    const float scale = gamma[c] * inv_std_[c];
    if (trained_mode_) {
      const float m1 = static_cast<float>(s1) / n;
      const float m2 = static_cast<float>(s2) / n;
      for (Index b = 0; b < B; ++b) {
        const Index off = (b * C + c) * S;
        dx.arr().segment(off, S) =
            scale * (gy.arr().segment(off, S) - m1 - xhat_.segment(off, S) * m2);
      }
    } else {
      for (Index b = 0; b < B; ++b) {
        const Index off = (b * C + c) * S;
        dx.arr().segment(off, S) = scale * gy.arr().segment(off, S);
      }
    }
  }
  return dx;
}

void BatchNormLayer::for_each_param(const ParamVisitor& f) {
  f("gamma", gamma, ParamKind::kNormAffine);
  f("beta", beta, ParamKind::kNormAffine);
  f("running_mean", running_mean, ParamKind::kBuffer);
  f("running_var", running_var, ParamKind::kBuffer);
}

// --------------------------------------------------------------------------
// LayerNorm
// --------------------------------------------------------------------------

LayerNormLayer::LayerNormLayer(std::vector<Index> shape)
    : norm_shape(std::move(shape)), group(Tensor::count(norm_shape)),
      gamma({group}), beta({group}) {
  gamma.arr().setOnes();
  gamma.require_grad();
  beta.require_grad();
}

std::vector<Index> LayerNormLayer::out_shape(const std::vector<Index>& in) const {
  if (in.size() < 2) throw std::invalid_argument("layer_norm: rank < 2");
  Index g = 1;
  for (std::size_t i = 1; i < in.size(); ++i) g *= in[i];
  if (g != group) {
    throw std::invalid_argument("layer_norm: normalized size " + std::to_string(group) +
                                " != input group " + std::to_string(g));
  }
  return in;
}

Tensor LayerNormLayer::forward(const Tensor& x, bool /*training*/, bool track) {
  out_shape(x.shape());
  const Index R = x.dim(0), G = group;
  Tensor y(x.shape());
  Eigen::ArrayXf xhat(x.numel()), inv_std(R);
  for (Index r = 0; r < R; ++r) {
    auto row = x.arr().segment(r * G, G);
    const float mu = row.mean();
    const float var = (row - mu).square().mean();
    inv_std[r] = 1.0f / std::sqrt(var + kNormEps);
    xhat.segment(r * G, G) = (row - mu) * inv_std[r];
    y.arr().segment(r * G, G) = xhat.segment(r * G, G) * gamma.arr() + beta.arr();
  }
  if (track) {
    xhat_ = std::move(xhat);
    inv_std_ = std::move(inv_std);
    in_shape_ = x.shape();
    has_cache_ = true;
  }
  return y;
}

Tensor LayerNormLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "layer_norm");
  const Index R = in_shape_[0], G = group;
  Tensor dx(in_shape_);
  for (Index r = 0; r < R; ++r) {
    auto g = gy.arr().segment(r * G, G);
    auto xh = xhat_.segment(r * G, G);
    gamma.grad() += g * xh;
    beta.grad() += g;
    Eigen::ArrayXf dxhat = g * gamma.arr();
    const float m1 = dxhat.mean();
    const float m2 = (dxhat * xh).mean();
    dx.arr().segment(r * G, G) = inv_std_[r] * (dxhat - m1 - xh * m2);
  }
  return dx;
}

void LayerNormLayer::for_each_param(const ParamVisitor& f) {
  f("gamma", gamma, ParamKind::kNormAffine);
  f("beta", beta, ParamKind::kNormAffine);
}

// --------------------------------------------------------------------------
// Elementwise activations
// --------------------------------------------------------------------------

Tensor ReluLayer::forward(const Tensor& x, bool, bool track) {
  if (track) {
    input_ = x.arr();
    has_cache_ = true;
  }
  return Tensor(x.shape(), act_fn::apply(Act::kRelu, x.arr()));
}

Tensor ReluLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "relu");
  return Tensor(gy.shape(), gy.arr() * act_fn::deriv(Act::kRelu, input_));
}

Tensor GeluLayer::forward(const Tensor& x, bool, bool track) {
  if (track) {
    input_ = x.arr();
    has_cache_ = true;
  }
  return Tensor(x.shape(), act_fn::apply(Act::kGelu, x.arr()));
}

Tensor GeluLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "gelu");
  return Tensor(gy.shape(), gy.arr() * act_fn::deriv(Act::kGelu, input_));
}

Tensor LeakyReluLayer::forward(const Tensor& x, bool, bool track) {
  if (track) {
    input_ = x.arr();
    has_cache_ = true;
  }
  return Tensor(x.shape(), act_fn::apply(Act::kLeakyRelu, x.arr()));
}

Tensor LeakyReluLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "leaky_relu");
  return Tensor(gy.shape(), gy.arr() * act_fn::deriv(Act::kLeakyRelu, input_));
}

// --------------------------------------------------------------------------
// Softmax (last dim)
// --------------------------------------------------------------------------

Tensor SoftmaxLayer::forward(const Tensor& x, bool, bool track) {
  const Index F = x.shape().back();
  const Index R = x.numel() / F;
  Tensor y(x.shape());
  for (Index r = 0; r < R; ++r) {
    auto row = x.arr().segment(r * F, F);
    Eigen::ArrayXf e = (row - row.maxCoeff()).exp();
    y.arr().segment(r * F, F) = e / e.sum();
  }
  if (track) {
    output_ = y;
    has_cache_ = true;
  }
  return y;
}

Tensor SoftmaxLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "softmax");
  const Index F = output_.shape().back();
  const Index R = output_.numel() / F;
  Tensor dx(output_.shape());
  for (Index r = 0; r < R; ++r) {
    auto yv = output_.arr().segment(r * F, F);
    auto gv = gy.arr().segment(r * F, F);
    const float dot = (gv * yv).sum();
    dx.arr().segment(r * F, F) = yv * (gv - dot);
  }
  return dx;
}

// --------------------------------------------------------------------------
// ConvAttention
// --------------------------------------------------------------------------

ConvAttentionLayer::ConvAttentionLayer(int ch, int d, Act skip)
    : channels(ch), qkv_dim(d), skip_act(skip),
      wq({d, ch}), wk({d, ch}), wv({d, ch}),
      bq({d}), bk({d}), bv({d}), wp({ch, d}), bp({ch}) {
  if (ch <= 0 || d <= 0) throw std::invalid_argument("conv_attention: bad dims");
  for (Tensor* t : {&wq, &wk, &wv, &bq, &bk, &bv, &wp, &bp}) t->require_grad();
}

std::vector<Index> ConvAttentionLayer::out_shape(const std::vector<Index>& in) const {
  require_rank4(in, "conv_attention");
  if (in[1] != channels) {
    throw std::invalid_argument("conv_attention: input channels " +
                                std::to_string(in[1]) + " != expected " +
                                std::to_string(channels));
  }
  return in;
}

Tensor ConvAttentionLayer::forward(const Tensor& x, bool /*training*/, bool track) {
  out_shape(x.shape());
  const Index B = x.dim(0), C = channels, T = x.dim(2) * x.dim(3), d = qkv_dim;

  Tensor y(x.shape());
  Tensor q({B, d, T}), k({B, d, T}), v({B, d, T});
  Tensor attn({B, T, T}), ctx({B, d, T}), preact({B, C, T});
  auto wqm = wq.mat(d, C), wkm = wk.mat(d, C), wvm = wv.mat(d, C);
  auto wpm = wp.mat(C, d);
  Eigen::Map<const Eigen::VectorXf> bqv(bq.data(), d), bkv(bk.data(), d),
      bvv(bv.data(), d), bpv(bp.data(), C);

  for (Index b = 0; b < B; ++b) {
    ConstMapRM X(x.data() + b * C * T, C, T);
    MapRM Q(q.data() + b * d * T, d, T), K(k.data() + b * d * T, d, T),
        V(v.data() + b * d * T, d, T);
    Q.noalias() = wqm * X;
    Q.colwise() += bqv;
    K.noalias() = wkm * X;
    K.colwise() += bkv;
    V.noalias() = wvm * X;
    V.colwise() += bvv;

    MapRM A(attn.data() + b * T * T, T, T);
    A.noalias() = Q.transpose() * K;
    for (Index t = 0; t < T; ++t) {
      auto row = A.row(t).array();
      Eigen::ArrayXf e = (row - row.maxCoeff()).exp();
      A.row(t) = (e / e.sum()).matrix();
    }

    MapRM O(ctx.data() + b * d * T, d, T);
    O.noalias() = V * A.transpose();

    MapRM Z(preact.data() + b * C * T, C, T);
    Z.noalias() = wpm * O;
    Z.colwise() += bpv;
    Z.noalias() += X;

    Eigen::Map<ArrayXf> yb(y.data() + b * C * T, C * T);
    yb = act_fn::apply(skip_act, Eigen::Map<const ArrayXf>(Z.data(), C * T));
  }
  if (track) {
    input_ = x;
    q_ = std::move(q);
    k_ = std::move(k);
    v_ = std::move(v);
    attn_ = std::move(attn);
    ctx_ = std::move(ctx);
    preact_ = std::move(preact);
    has_cache_ = true;
  }
  return y;
}

Tensor ConvAttentionLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "conv_attention");
  const Index B = input_.dim(0), C = channels, d = qkv_dim;
  const Index T = input_.dim(2) * input_.dim(3);

  Tensor dx(input_.shape());
  auto wqm = wq.mat(d, C), wkm = wk.mat(d, C), wvm = wv.mat(d, C);
  auto wpm = wp.mat(C, d);
  auto dwq = wq.grad_mat(d, C), dwk = wk.grad_mat(d, C), dwv = wv.grad_mat(d, C);
  auto dwp = wp.grad_mat(C, d);
  Eigen::Map<Eigen::VectorXf> dbq(bq.grad().data(), d), dbk(bk.grad().data(), d),
      dbv(bv.grad().data(), d), dbp(bp.grad().data(), C);

  MatRM gZ(C, T), gO(d, T), gA(T, T), gS(T, T), gQ(d, T), gK(d, T), gV(d, T);
  for (Index b = 0; b < B; ++b) {
    ConstMapRM X(input_.data() + b * C * T, C, T);
    ConstMapRM Q(q_.data() + b * d * T, d, T), K(k_.data() + b * d * T, d, T),
        V(v_.data() + b * d * T, d, T);
    ConstMapRM A(attn_.data() + b * T * T, T, T);
    ConstMapRM O(ctx_.data() + b * d * T, d, T);

    Eigen::Map<const ArrayXf> gout(gy.data() + b * C * T, C * T);
    Eigen::Map<const ArrayXf> zb(preact_.data() + b * C * T, C * T);
    Eigen::Map<ArrayXf>(gZ.data(), C * T) = gout * act_fn::deriv(skip_act, zb);

    dwp.noalias() += gZ * O.transpose();
    dbp.noalias() += gZ.rowwise().sum();
    gO.noalias() = wpm.transpose() * gZ;

    gV.noalias() = gO * A;
    gA.noalias() = gO.transpose() * V;
    for (Index t = 0; t < T; ++t) {
      auto arow = A.row(t).array();
      auto grow = gA.row(t).array();
      const float dot = (grow * arow).sum();
      gS.row(t) = (arow * (grow - dot)).matrix();
    }
    gQ.noalias() = K * gS.transpose();
    gK.noalias() = Q * gS;

    dwq.noalias() += gQ * X.transpose();
    dbq.noalias() += gQ.rowwise().sum();
    dwk.noalias() += gK * X.transpose();
    dbk.noalias() += gK.rowwise().sum();
    dwv.noalias() += gV * X.transpose();
    dbv.noalias() += gV.rowwise().sum();

    MapRM gX(dx.data() + b * C * T, C, T);
    gX.noalias() = gZ;  // skip path
    gX.noalias() += wqm.transpose() * gQ;
    gX.noalias() += wkm.transpose() * gK;
    gX.noalias() += wvm.transpose() * gV;
  }
  return dx;
}

void ConvAttentionLayer::for_each_param(const ParamVisitor& f) {
  f("wq", wq, ParamKind::kWeight);
  f("bq", bq, ParamKind::kBias);
  f("wk", wk, ParamKind::kWeight);
  f("bk", bk, ParamKind::kBias);
  f("wv", wv, ParamKind::kWeight);
  f("bv", bv, ParamKind::kBias);
  f("wp", wp, ParamKind::kWeight);
  f("bp", bp, ParamKind::kBias);
}

// --------------------------------------------------------------------------
// Flatten
// --------------------------------------------------------------------------

std::vector<Index> FlattenLayer::out_shape(const std::vector<Index>& in) const {
  if (in.size() < 2) throw std::invalid_argument("flatten: rank < 2");
  Index g = 1;
  for (std::size_t i = 1; i < in.size(); ++i) g *= in[i];
  return {in[0], g};
}

Tensor FlattenLayer::forward(const Tensor& x, bool, bool track) {
  if (track) {
    in_shape_ = x.shape();
    has_cache_ = true;
  }
  return x.reshaped(out_shape(x.shape()));
}

Tensor FlattenLayer::backward(const Tensor& gy) {
  check_cache(has_cache_, "flatten");
  return gy.reshaped(in_shape_);
}

// --------------------------------------------------------------------------
// Variant dispatch
// --------------------------------------------------------------------------

std::string layer_kind(const Layer& layer) {
  struct Kind {
    std::string operator()(const Conv2dLayer&) { return "conv2d"; }
    std::string operator()(const LinearLayer&) { return "linear"; }
    std::string operator()(const BatchNormLayer&) { return "batch_norm"; }
    std::string operator()(const LayerNormLayer&) { return "layer_norm"; }
    std::string operator()(const ReluLayer&) { return "relu"; }
    std::string operator()(const GeluLayer&) { return "gelu"; }
    std::string operator()(const LeakyReluLayer&) { return "leaky_relu"; }
    std::string operator()(const SoftmaxLayer&) { return "softmax"; }
    std::string operator()(const ConvAttentionLayer&) { return "conv_attention"; }
    std::string operator()(const FlattenLayer&) { return "flatten"; }
  };
  return std::visit(Kind{}, layer);
}

std::vector<Index> layer_out_shape(const Layer& layer, const std::vector<Index>& in) {
  return std::visit([&](const auto& l) { return l.out_shape(in); }, layer);
}

Tensor layer_forward(Layer& layer, const Tensor& x, bool training, bool track) {
  return std::visit([&](auto& l) { return l.forward(x, training, track); }, layer);
}

Tensor layer_backward(Layer& layer, const Tensor& gy) {
  return std::visit([&](auto& l) { return l.backward(gy); }, layer);
}

void layer_for_each_param(Layer& layer, const ParamVisitor& f) {
  std::visit([&](auto& l) { l.for_each_param(f); }, layer);
}

}  // namespace nac
