#include "deop/mlp.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "deop/rng.hpp"

namespace deop {

std::vector<int> MlpParams::layer_sizes() const {
  std::vector<int> sizes;
  sizes.push_back(in_dim());
  for (const auto& l : layers) sizes.push_back(static_cast<int>(l.W.rows()));
  return sizes;
}

bool MlpParams::finite() const {
  for (const auto& l : layers)
    if (!l.W.allFinite() || !l.b.allFinite()) return false;
  return true;
}

MlpParams mlp_init(const std::vector<int>& layer_sizes, std::uint64_t seed) {
  if (layer_sizes.size() < 2)
    throw std::invalid_argument("mlp_init: need at least 2 layer sizes");
  for (int s : layer_sizes)
    if (s <= 0) throw std::invalid_argument("mlp_init: sizes must be positive");

  Rng rng(seed);
  MlpParams params;
  for (std::size_t k = 0; k + 1 < layer_sizes.size(); ++k) {
    int in = layer_sizes[k];
    int out = layer_sizes[k + 1];
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    MlpParams::Layer layer;
    layer.W.resize(out, in);
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < in; ++j) layer.W(i, j) = rng.uniform(-bound, bound);
    layer.b = Vector::Zero(out);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

Vector mlp_forward(const MlpParams& params, const Vector& input) {
  return mlp_forward_batch(params, input).col(0);
}

Matrix mlp_forward_batch(const MlpParams& params, const Matrix& input) {
  if (input.rows() != params.in_dim())
    throw std::invalid_argument("mlp_forward: input dimension mismatch");
  Matrix h = input;
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    // kept structurally identical to the taped path so both agree bitwise
    Matrix z = params.layers[k].W * h;
    z = z.colwise() + params.layers[k].b;
    if (k + 1 < params.layers.size())
      h = z.array().max(0.0).matrix();
    else
      h = std::move(z);
  }
  return h;
}

TapedMlp TapedMlp::attach(Tape& tape, const MlpParams& params) {
  TapedMlp t;
  for (const auto& l : params.layers) {
    t.Ws.push_back(tape.param(l.W));
    t.bs.push_back(tape.param(Matrix(l.b)));
  }
  return t;
}

Var TapedMlp::forward(Tape& tape, Var input) const {
  Var h = input;
  for (std::size_t k = 0; k < Ws.size(); ++k) {
    Var z = tape.add_col(tape.matmul(Ws[k], h), bs[k]);
    h = (k + 1 < Ws.size()) ? tape.relu(z) : z;
  }
  return h;
}

MlpGrads TapedMlp::grads(const Gradients& g, const MlpParams& shapes) const {
  MlpGrads out;
  for (std::size_t k = 0; k < Ws.size(); ++k) {
    MlpParams::Layer l;
    l.W = g.has(Ws[k]) ? g.at(Ws[k])
                       : Matrix::Zero(shapes.layers[k].W.rows(),
                                      shapes.layers[k].W.cols());
    l.b = g.has(bs[k]) ? Vector(g.at(bs[k]).col(0))
                       : Vector::Zero(shapes.layers[k].b.size());
    out.layers.push_back(std::move(l));
  }
  return out;
}

OptimizerState OptimizerState::sgd(double lr) {
  OptimizerState s;
  s.method = Method::kSgd;
  s.lr = lr;
  return s;
}

OptimizerState OptimizerState::adam(double lr) {
  OptimizerState s;
  s.method = Method::kAdam;
  s.lr = lr;
  return s;
}

void optimizer_step(MlpParams& params, const MlpGrads& grads,
                    OptimizerState& state) {
  if (grads.layers.size() != params.layers.size())
    throw std::invalid_argument("optimizer_step: layer count mismatch");
  if (!grads.finite())
    throw std::runtime_error(
        "optimizer_step: non-finite gradient, training aborted");

  if (state.method == OptimizerState::Method::kSgd) {
    for (std::size_t k = 0; k < params.layers.size(); ++k) {
      params.layers[k].W -= state.lr * grads.layers[k].W;
      params.layers[k].b -= state.lr * grads.layers[k].b;
    }
    state.step += 1;
    return;
  }

  if (state.m.empty()) {
    for (const auto& l : params.layers) {
      MlpParams::Layer zw{Matrix::Zero(l.W.rows(), l.W.cols()),
                          Vector::Zero(l.b.size())};
      state.m.push_back(zw);
      state.v.push_back(zw);
    }
  }
  state.step += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    auto upd = [&](Matrix& p, Matrix& m, Matrix& v, const Matrix& g) {
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
      Matrix mhat = m / bc1;
      Matrix vhat = v / bc2;
      p -= state.lr *
           mhat.cwiseQuotient((vhat.cwiseSqrt().array() + state.eps).matrix());
    };
    upd(params.layers[k].W, state.m[k].W, state.v[k].W, grads.layers[k].W);
    Matrix pb = params.layers[k].b, mb = state.m[k].b, vb = state.v[k].b;
    upd(pb, mb, vb, Matrix(grads.layers[k].b));
    params.layers[k].b = pb.col(0);
    state.m[k].b = mb.col(0);
    state.v[k].b = vb.col(0);
  }
}

std::string mlp_to_json(const MlpParams& params, std::uint64_t seed,
                        const std::map<std::string, std::string>& metadata) {
  nlohmann::json j;
  j["format"] = "deop-mlp-v1";
  j["seed"] = seed;
  j["layer_sizes"] = params.layer_sizes();
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : params.layers) {
    nlohmann::json jl;
    std::vector<double> w(l.W.size());
    for (int i = 0; i < l.W.rows(); ++i)
      for (int c = 0; c < l.W.cols(); ++c) w[i * l.W.cols() + c] = l.W(i, c);
    jl["weight"] = w;
    jl["bias"] = std::vector<double>(l.b.data(), l.b.data() + l.b.size());
    layers.push_back(jl);
  }
  j["layers"] = layers;
  j["metadata"] = metadata;
  return j.dump(1);
}

MlpParams mlp_from_json(const std::string& json_text, std::uint64_t* seed,
                        std::map<std::string, std::string>* metadata) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  if (j.value("format", "") != "deop-mlp-v1")
    throw std::runtime_error("mlp_from_json: unknown checkpoint format");
  std::vector<int> sizes = j.at("layer_sizes").get<std::vector<int>>();
  MlpParams params;
  const auto& layers = j.at("layers");
  for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
    int in = sizes[k], out = sizes[k + 1];
    const auto& jl = layers.at(k);
    std::vector<double> w = jl.at("weight").get<std::vector<double>>();
    std::vector<double> b = jl.at("bias").get<std::vector<double>>();
    if (static_cast<int>(w.size()) != in * out ||
        static_cast<int>(b.size()) != out)
      throw std::runtime_error("mlp_from_json: size mismatch");
    MlpParams::Layer layer;
    layer.W.resize(out, in);
    for (int i = 0; i < out; ++i)
      for (int c = 0; c < in; ++c) layer.W(i, c) = w[i * in + c];
    layer.b = Eigen::Map<Vector>(b.data(), out);
    params.layers.push_back(std::move(layer));
  }
  if (seed) *seed = j.value("seed", std::uint64_t{0});
  if (metadata && j.contains("metadata"))
    *metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  return params;
}

}  // namespace deop
