#pragma once

#include "nac/layers.hpp"
#include "nac/rng.hpp"

#include <array>
#include <vector>

namespace nac {

/// Ordered layer list with an input shape fixed at construction. Value type:
/// copying a network copies its parameters, so snapshots are cheap to reason
/// about. Confine an instance to one worker at a time.
struct Network {
  std::vector<Layer> layers;
  std::array<Index, 3> input_shape{1, 11, 11};  // C,H,W
  bool training = true;
  bool forward_tracked = false;
};

/// Validates the full shape trace; throws std::invalid_argument naming the
/// offending layer index on any mismatch or non-positive spatial dim.
Network make_network(std::vector<Layer> layers, std::array<Index, 3> input_shape);

std::vector<std::vector<Index>> shape_trace(const Network& net, Index batch = 1);

/// Kaiming-uniform on conv/linear/attention weights, zeros for biases,
/// ones/zeros for norm affine parameters.
void init_params(Network& net, std::uint64_t seed);

void set_training(Network& net, bool training);

Tensor forward(Network& net, const Tensor& batch, bool track_grad = false);

void backward(Network& net, const Tensor& loss_grad);

struct ParamRef {
  int layer;
  const char* name;
  Tensor* tensor;
  ParamKind kind;
};

/// Parameter store in a stable order (layer index, declaration order).
std::vector<ParamRef> parameters(Network& net);

void zero_grad(Network& net);
Index param_count(Network& net);  // trainable scalars

}  // namespace nac
