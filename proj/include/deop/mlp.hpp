#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "deop/linalg.hpp"
#include "deop/tape.hpp"

namespace deop {

// Dense feedforward network: affine layers with ReLU on hidden layers and
// identity on the output layer.
struct MlpParams {
  struct Layer {
    Matrix W;  // out x in
    Vector b;  // out
  };
  std::vector<Layer> layers;

  int in_dim() const { return static_cast<int>(layers.front().W.cols()); }
  int out_dim() const { return static_cast<int>(layers.back().W.rows()); }
  std::vector<int> layer_sizes() const;
  bool finite() const;
};

// Gradient buffers with the same shapes as MlpParams.
using MlpGrads = MlpParams;

// Weights uniform(-1/sqrt(in), 1/sqrt(in)) per layer, biases zero,
// deterministic given seed.
MlpParams mlp_init(const std::vector<int>& layer_sizes, std::uint64_t seed);

Vector mlp_forward(const MlpParams& params, const Vector& input);
Matrix mlp_forward_batch(const MlpParams& params, const Matrix& input);

// Tape-attached network: leaves for every W/b so gradients can be pulled
// back out after backward().
struct TapedMlp {
  std::vector<Var> Ws;
  std::vector<Var> bs;

  static TapedMlp attach(Tape& tape, const MlpParams& params);
  // input is in_dim x batch
  Var forward(Tape& tape, Var input) const;
  MlpGrads grads(const Gradients& g, const MlpParams& shapes) const;
};

struct OptimizerState {
  enum class Method { kSgd, kAdam };
  Method method = Method::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<MlpParams::Layer> m;  // first moments (adam)
  std::vector<MlpParams::Layer> v;  // second moments (adam)

  static OptimizerState sgd(double lr);
  static OptimizerState adam(double lr);
};

// In-place parameter update; throws on non-finite gradients.
void optimizer_step(MlpParams& params, const MlpGrads& grads,
                    OptimizerState& state);

// --- checkpoint format -------------------------------------------------------

// Self-describing JSON: layer sizes, row-major weight/bias arrays, seed,
// free-form metadata.
std::string mlp_to_json(const MlpParams& params, std::uint64_t seed,
                        const std::map<std::string, std::string>& metadata);
MlpParams mlp_from_json(const std::string& json_text, std::uint64_t* seed,
                        std::map<std::string, std::string>* metadata);

}  // namespace deop
