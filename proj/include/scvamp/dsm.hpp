#pragma once

#include "scvamp/rng.hpp"
#include "scvamp/score_models.hpp"
#include "scvamp/types.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scvamp {

namespace detail {
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}
inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace detail

/// Fully connected score network with softplus hidden activations and a
/// linear output layer. Inputs are columns [r1; r2; sigma]; outputs are the
/// two score components. Default architecture is 3 -> 128 -> 128 -> 128 -> 2.
struct MlpScoreNet {
  std::vector<int> arch{3, 128, 128, 128, 2};
  std::vector<Matrix> weights;  // weights[l]: arch[l+1] x arch[l]
  std::vector<Vector> biases;
  std::uint64_t init_seed = 0;
  std::string init_kind = "glorot-uniform";

  std::size_t layer_count() const { return weights.size(); }

  /// Batched forward pass (columns = samples).
  Matrix forward(const Eigen::Ref<const Matrix>& inputs) const {
    if (inputs.rows() != arch.front())
      throw std::invalid_argument("MlpScoreNet::forward: input dimension mismatch");
    Matrix a = inputs;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      Matrix z = (weights[l] * a).colwise() + biases[l];
      if (l + 1 < weights.size())
        a = z.unaryExpr([](double x) { return detail::softplus(x); });
      else
        a = std::move(z);
    }
    return a;
  }
};

/// Glorot-uniform initialized network; the seed is recorded so the weight
/// file can state how the parameters were produced.
inline MlpScoreNet make_mlp_score_net(RngStream& rng, std::uint64_t recorded_seed,
                                      std::vector<int> arch = {3, 128, 128, 128, 2}) {
  if (arch.size() < 2) throw std::invalid_argument("make_mlp_score_net: need at least two layers");
  MlpScoreNet net;
  net.arch = std::move(arch);
  net.init_seed = recorded_seed;
  for (std::size_t l = 0; l + 1 < net.arch.size(); ++l) {
    const int fan_in = net.arch[l];
    const int fan_out = net.arch[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(fan_out, fan_in);
    for (Index j = 0; j < w.cols(); ++j)
      for (Index i = 0; i < w.rows(); ++i) w(i, j) = limit * rng.uniform_sym();
    net.weights.push_back(std::move(w));
    net.biases.push_back(Vector::Zero(fan_out));
  }
  return net;
}

/// Pair-interface forward: (r1, r2, sigma) -> (s1, s2).
inline std::pair<double, double> mlp_forward(const MlpScoreNet& net, double r1, double r2,
                                             double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("mlp_forward: sigma must be > 0");
  Matrix in(3, 1);
  in << r1, r2, sigma;
  const Matrix out = net.forward(in);
  return {out(0, 0), out(1, 0)};
}

/// One training batch: clean pairs x0, noise z ~ N(0, sigma^2 I2) with
/// per-sample sigma.
struct DsmBatch {
  Matrix x0;     // 2 x B
  Matrix z;      // 2 x B
  Vector sigma;  // B
};

struct MlpGradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
};

namespace detail {

struct ForwardCache {
  std::vector<Matrix> pre;   // pre-activations per layer
  std::vector<Matrix> post;  // post-activations, post[0] = input
};

inline Matrix forward_cached(const MlpScoreNet& net, const Matrix& inputs, ForwardCache& cache) {
  cache.pre.clear();
  cache.post.clear();
  cache.post.push_back(inputs);
  Matrix a = inputs;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    Matrix z = (net.weights[l] * a).colwise() + net.biases[l];
    cache.pre.push_back(z);
    if (l + 1 < net.weights.size()) {
      a = z.unaryExpr([](double x) { return softplus(x); });
      cache.post.push_back(a);
    } else {
      a = std::move(z);
    }
  }
  return a;
}

inline Matrix dsm_inputs(const DsmBatch& batch) {
  Matrix in(3, batch.x0.cols());
  in.topRows(2) = batch.x0 + batch.z;
  in.row(2) = batch.sigma.transpose();
  return in;
}

inline Matrix dsm_residual(const Matrix& out, const DsmBatch& batch) {
  Matrix resid = out;
  for (Index j = 0; j < out.cols(); ++j) {
    const double s2 = batch.sigma[j] * batch.sigma[j];
    resid.col(j) += batch.z.col(j) / s2;
  }
  return resid;
}

}  // namespace detail

/// Score-matching loss: mean over the batch of || s(x0 + z, sigma) + z/sigma^2 ||^2.
inline double dsm_loss(const MlpScoreNet& net, const DsmBatch& batch) {
  if (batch.x0.cols() == 0) throw std::invalid_argument("dsm_loss: empty batch");
  if (batch.z.cols() != batch.x0.cols() || batch.sigma.size() != batch.x0.cols())
    throw std::invalid_argument("dsm_loss: batch fields must agree in size");
  const Matrix out = net.forward(detail::dsm_inputs(batch));
  const Matrix resid = detail::dsm_residual(out, batch);
  return resid.squaredNorm() / static_cast<double>(batch.x0.cols());
}

/// Exact backpropagated gradient of dsm_loss with respect to every weight and
/// bias (mean reduction over the batch).
inline MlpGradients dsm_gradient(const MlpScoreNet& net, const DsmBatch& batch,
                                 double* loss_out = nullptr) {
  if (batch.x0.cols() == 0) throw std::invalid_argument("dsm_gradient: empty batch");
  const double batch_size = static_cast<double>(batch.x0.cols());
  detail::ForwardCache cache;
  const Matrix out = detail::forward_cached(net, detail::dsm_inputs(batch), cache);
  const Matrix resid = detail::dsm_residual(out, batch);
  if (loss_out != nullptr) *loss_out = resid.squaredNorm() / batch_size;

  MlpGradients grads;
  grads.weights.resize(net.weights.size());
  grads.biases.resize(net.biases.size());
  Matrix delta = 2.0 / batch_size * resid;
  for (std::size_t l = net.weights.size(); l-- > 0;) {
    grads.weights[l] = delta * cache.post[l].transpose();
    grads.biases[l] = delta.rowwise().sum();
    if (l > 0) {
      const Matrix gate =
          cache.pre[l - 1].unaryExpr([](double x) { return detail::logistic(x); });
      delta = (net.weights[l].transpose() * delta).cwiseProduct(gate);
    }
  }
  return grads;
}

struct AdamState {
  std::vector<Matrix> m_w, v_w;
  std::vector<Vector> m_b, v_b;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline AdamState make_adam_state(const MlpScoreNet& net) {
  AdamState s;
  for (const auto& w : net.weights) {
    s.m_w.push_back(Matrix::Zero(w.rows(), w.cols()));
    s.v_w.push_back(Matrix::Zero(w.rows(), w.cols()));
  }
  for (const auto& b : net.biases) {
    s.m_b.push_back(Vector::Zero(b.size()));
    s.v_b.push_back(Vector::Zero(b.size()));
  }
  return s;
}

/// Bias-corrected Adam update.
inline void adam_step(MlpScoreNet& net, const MlpGradients& grads, AdamState& state, double lr) {
  if (grads.weights.size() != net.weights.size())
    throw std::invalid_argument("adam_step: gradient shape mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    state.m_w[l] = state.beta1 * state.m_w[l] + (1.0 - state.beta1) * grads.weights[l];
    state.v_w[l] =
        state.beta2 * state.v_w[l] + (1.0 - state.beta2) * grads.weights[l].cwiseAbs2();
    net.weights[l].array() -= lr * (state.m_w[l].array() / c1) /
                              ((state.v_w[l].array() / c2).sqrt() + state.epsilon);
    state.m_b[l] = state.beta1 * state.m_b[l] + (1.0 - state.beta1) * grads.biases[l];
    state.v_b[l] = state.beta2 * state.v_b[l] + (1.0 - state.beta2) * grads.biases[l].cwiseAbs2();
    net.biases[l].array() -= lr * (state.m_b[l].array() / c1) /
                             ((state.v_b[l].array() / c2).sqrt() + state.epsilon);
  }
}

/// Single-cycle cosine annealing: lr0 * (1 + cos(pi t / total)) / 2.
inline double cosine_lr(long t, long total, double lr0) {
  if (t < 0 || t > total) throw std::invalid_argument("cosine_lr: step out of range");
  if (total == 0) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(total)));
}

struct DsmConfig {
  double sigma_min = 0.01;
  double sigma_max = 3.0;
  long iterations = 20000;
  int batch = 256;
  double lr0 = 1e-3;
  std::uint64_t seed = 0;
  std::vector<int> arch{3, 128, 128, 128, 2};
  long checkpoint_every = 1000;
  // Draw the batch as antithetic (+z, -z) pairs sharing x0 and sigma. Every
  // sample keeps the exact (x0, sigma, z) law, so the empirical loss is an
  // unbiased estimate of the same objective, but the odd-in-z part of the
  // gradient noise cancels within each pair. Without this the 1/sigma^2
  // targets near sigma_min dominate the gradient noise and training stalls
  // well short of the achievable score accuracy.
  bool antithetic_noise = true;
};

struct TrainingReport {
  std::vector<std::pair<long, double>> checkpoints;  // (step, loss)
  double final_loss = 0.0;
  double wall_clock_seconds = 0.0;
  std::uint64_t seed = 0;
  bool aborted = false;
  std::string abort_reason;
};

/// Full training loop: fresh prior samples each step, sigma ~ U[min, max],
/// z ~ N(0, sigma^2 I2), Adam with cosine annealing. Deterministic given the
/// seed.
inline std::pair<MlpScoreNet, TrainingReport> train_dsm(
    const std::function<Matrix(RngStream&, int)>& sample_prior_pairs, const DsmConfig& config) {
  if (!(config.sigma_min > 0.0 && config.sigma_min < config.sigma_max))
    throw std::invalid_argument("train_dsm: need 0 < sigma_min < sigma_max");
  if (config.batch < 1) throw std::invalid_argument("train_dsm: batch must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  RngStream root(config.seed);
  RngStream init_rng = root.split("init");
  RngStream data_rng = root.split("data");
  MlpScoreNet net = make_mlp_score_net(init_rng, config.seed, config.arch);
  AdamState state = make_adam_state(net);
  TrainingReport report;
  report.seed = config.seed;

  double loss = 0.0;
  for (long it = 0; it < config.iterations; ++it) {
    DsmBatch batch;
    batch.sigma.resize(config.batch);
    batch.z.resize(2, config.batch);
    if (config.antithetic_noise && config.batch % 2 == 0) {
      const int pairs = config.batch / 2;
      const Matrix x0 = sample_prior_pairs(data_rng, pairs);
      if (x0.rows() != 2 || x0.cols() != pairs)
        throw std::invalid_argument("train_dsm: prior sampler must return a 2 x count matrix");
      batch.x0.resize(2, config.batch);
      for (int k = 0; k < pairs; ++k) {
        const double sigma =
            config.sigma_min + (config.sigma_max - config.sigma_min) * data_rng.uniform01();
        const double z1 = sigma * data_rng.gaussian();
        const double z2 = sigma * data_rng.gaussian();
        batch.x0.col(2 * k) = x0.col(k);
        batch.x0.col(2 * k + 1) = x0.col(k);
        batch.sigma[2 * k] = sigma;
        batch.sigma[2 * k + 1] = sigma;
        batch.z(0, 2 * k) = z1;
        batch.z(1, 2 * k) = z2;
        batch.z(0, 2 * k + 1) = -z1;
        batch.z(1, 2 * k + 1) = -z2;
      }
    } else {
      batch.x0 = sample_prior_pairs(data_rng, config.batch);
      if (batch.x0.rows() != 2 || batch.x0.cols() != config.batch)
        throw std::invalid_argument("train_dsm: prior sampler must return a 2 x count matrix");
      for (int j = 0; j < config.batch; ++j) {
        batch.sigma[j] =
            config.sigma_min + (config.sigma_max - config.sigma_min) * data_rng.uniform01();
        batch.z(0, j) = batch.sigma[j] * data_rng.gaussian();
        batch.z(1, j) = batch.sigma[j] * data_rng.gaussian();
      }
    }
    MlpGradients grads = dsm_gradient(net, batch, &loss);
    if (!std::isfinite(loss)) {
      report.aborted = true;
      report.abort_reason = "non-finite loss at step " + std::to_string(it);
      break;
    }
    adam_step(net, grads, state, cosine_lr(it, config.iterations, config.lr0));
    if ((it + 1) % config.checkpoint_every == 0) report.checkpoints.emplace_back(it + 1, loss);
  }
  report.final_loss = loss;
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(net), report};
}

namespace detail {
inline std::string format_g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}
}  // namespace detail

/// Versioned structured-text weight file (JSON layout, 17 significant digits
/// per value so the round trip is bit-exact). Written atomically.
inline void save_weights(const MlpScoreNet& net, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "{\n  \"format_version\": 1,\n  \"arch\": [";
  for (std::size_t i = 0; i < net.arch.size(); ++i)
    out << (i ? ", " : "") << net.arch[i];
  out << "],\n  \"activation\": \"softplus\",\n  \"init\": \"" << net.init_kind << "\",\n"
      << "  \"seed\": " << net.init_seed << ",\n  \"layers\": [\n";
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    out << "    {\"weights\": [";
    const Matrix& w = net.weights[l];
    bool first = true;
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) {  // row-major per the format
        out << (first ? "" : ", ") << detail::format_g17(w(i, j));
        first = false;
      }
    out << "],\n     \"biases\": [";
    for (Index i = 0; i < net.biases[l].size(); ++i)
      out << (i ? ", " : "") << detail::format_g17(net.biases[l][i]);
    out << "]}" << (l + 1 < net.weights.size() ? "," : "") << "\n";
  }
  out << "  ]\n}\n";
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw std::runtime_error("save_weights: cannot open " + tmp.string());
    f << out.str();
  }
  std::filesystem::rename(tmp, path);
}

MlpScoreNet load_weights(const std::filesystem::path& path);

/// Whole-signal score model backed by the pair network: the net is applied
/// independently to each of the N/2 pairs with sigma = sqrt(v_in), and the
/// squared norm of the assembled N-vector is what feeds the Fisher estimate.
/// An optional prior sampler enables the Monte Carlo MMSE path in state
/// evolution.
inline ScoreModel make_learned_pairwise_model(
    MlpScoreNet net, std::function<Vector(RngStream&, Index)> sample_prior = {}) {
  auto shared = std::make_shared<MlpScoreNet>(std::move(net));
  ScoreModel m;
  m.kind = "learned-mlp";
  m.score = [shared](const Vector& x, double v, const Vector*) {
    if (x.size() % 2 != 0)
      throw std::invalid_argument("learned-mlp model: dimension must be even");
    if (!(v > 0.0)) throw std::invalid_argument("learned-mlp model: variance must be > 0");
    const double sigma = std::sqrt(v);
    const Index pairs = x.size() / 2;
    Matrix in(3, pairs);
    for (Index k = 0; k < pairs; ++k) {
      in(0, k) = x[2 * k];
      in(1, k) = x[2 * k + 1];
      in(2, k) = sigma;
    }
    const Matrix out = shared->forward(in);
    Vector s(x.size());
    for (Index k = 0; k < pairs; ++k) {
      s[2 * k] = out(0, k);
      s[2 * k + 1] = out(1, k);
    }
    return s;
  };
  m.sample_prior = std::move(sample_prior);
  return m;
}

}  // namespace scvamp
