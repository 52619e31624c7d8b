#include "nac/network.hpp"

#include <cmath>
#include <stdexcept>

namespace nac {

Network make_network(std::vector<Layer> layers, std::array<Index, 3> input_shape) {
  Network net;
  net.layers = std::move(layers);
  net.input_shape = input_shape;
  shape_trace(net);  // throws on any incompatibility
  return net;
}

std::vector<std::vector<Index>> shape_trace(const Network& net, Index batch) {
  std::vector<std::vector<Index>> trace;
  std::vector<Index> shape{batch, net.input_shape[0], net.input_shape[1],
                           net.input_shape[2]};
  trace.push_back(shape);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    try {
      shape = layer_out_shape(net.layers[i], shape);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("layer " + std::to_string(i) + " (" +
                                  layer_kind(net.layers[i]) + "): " + e.what());
    }
    for (std::size_t d = 2; d < shape.size(); ++d) {
      if (shape[d] < 1) {
        throw std::invalid_argument("layer " + std::to_string(i) +
                                    ": non-positive spatial dim");
      }
    }
    trace.push_back(shape);
  }
  return trace;
}

namespace {

Index fan_in(const ParamRef& p) {
  // weight tensors are stored [out, in*k*k] or [out, in]
  return p.tensor->shape().size() == 2 ? p.tensor->dim(1) : p.tensor->numel();
}

}  // namespace

void init_params(Network& net, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : parameters(net)) {
    switch (p.kind) {
      case ParamKind::kWeight: {
        const float bound = std::sqrt(6.0f / static_cast<float>(fan_in(p)));
        for (Index i = 0; i < p.tensor->numel(); ++i) {
          (*p.tensor)[i] = static_cast<float>(uniform_real(rng, -bound, bound));
        }
        break;
      }
      case ParamKind::kBias:
        p.tensor->arr().setZero();
        break;
      case ParamKind::kNormAffine:
        // gamma was constructed as ones, beta as zeros; reset to that state
        if (std::string(p.name) == "gamma") {
          p.tensor->arr().setOnes();
        } else {
          p.tensor->arr().setZero();
        }
        break;
      case ParamKind::kBuffer:
        if (std::string(p.name) == "running_var") {
          p.tensor->arr().setOnes();
        } else {
          p.tensor->arr().setZero();
        }
        break;
    }
  }
}

void set_training(Network& net, bool training) { net.training = training; }

Tensor forward(Network& net, const Tensor& batch, bool track_grad) {
  const auto& s = batch.shape();
  if (s.size() != 4 || s[1] != net.input_shape[0] || s[2] != net.input_shape[1] ||
      s[3] != net.input_shape[2]) {
    throw std::invalid_argument("forward: batch shape " + shape_string(s) +
                                " does not match network input");
  }
  Tensor x = batch;
  for (auto& layer : net.layers) {
    x = layer_forward(layer, x, net.training, track_grad);
  }
  net.forward_tracked = track_grad;
  return x;
}

void backward(Network& net, const Tensor& loss_grad) {
  if (!net.forward_tracked) {
    throw std::logic_error("backward: no tracked forward pass");
  }
  Tensor g = loss_grad;
  for (auto it = net.layers.rbegin(); it != net.layers.rend(); ++it) {
    g = layer_backward(*it, g);
  }
}

std::vector<ParamRef> parameters(Network& net) {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    layer_for_each_param(net.layers[i],
                         [&](const char* name, Tensor& t, ParamKind kind) {
                           out.push_back({static_cast<int>(i), name, &t, kind});
                         });
  }
  return out;
}

void zero_grad(Network& net) {
  for (auto& p : parameters(net)) {
    if (p.kind != ParamKind::kBuffer) p.tensor->zero_grad();
  }
}

Index param_count(Network& net) {
  Index n = 0;
  for (auto& p : parameters(net)) {
    if (p.kind != ParamKind::kBuffer) n += p.tensor->numel();
  }
  return n;
}

}  // namespace nac
