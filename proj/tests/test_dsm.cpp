#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "scvamp/dsm.hpp"
#include "scvamp/siso.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace scvamp;

namespace {

Matrix sample_pairs(RngStream& rng, int count, const PairwiseGaussianParams& p) {
  Matrix out(2, count);
  const double sd = std::sqrt(p.variance);
  const double ortho = std::sqrt(1.0 - p.correlation * p.correlation);
  for (int j = 0; j < count; ++j) {
    const double g1 = rng.gaussian();
    const double g2 = rng.gaussian();
    out(0, j) = sd * g1;
    out(1, j) = sd * (p.correlation * g1 + ortho * g2);
  }
  return out;
}

// Relative RMS error of the net against the analytic smoothed score over a
// held-out set with sigma ~ U[0.1, 3].
double score_rel_rms(const MlpScoreNet& net, const PairwiseGaussianParams& p, int samples,
                     std::uint64_t seed) {
  RngStream rng(seed);
  double err = 0.0, ref = 0.0;
  for (int i = 0; i < samples; ++i) {
    const Matrix x0 = sample_pairs(rng, 1, p);
    const double sigma = 0.1 + 2.9 * rng.uniform01();
    Vector r(2);
    r << x0(0, 0) + sigma * rng.gaussian(), x0(1, 0) + sigma * rng.gaussian();
    const Vector truth = score_pairwise_gaussian(r, sigma * sigma, p);
    const auto [s1, s2] = mlp_forward(net, r[0], r[1], sigma);
    err += (s1 - truth[0]) * (s1 - truth[0]) + (s2 - truth[1]) * (s2 - truth[1]);
    ref += truth.squaredNorm();
  }
  return std::sqrt(err / ref);
}

MlpScoreNet zero_net(std::vector<int> arch) {
  RngStream rng(0);
  MlpScoreNet net = make_mlp_score_net(rng, 0, std::move(arch));
  for (auto& w : net.weights) w.setZero();
  for (auto& b : net.biases) b.setZero();
  return net;
}

}  // namespace

TEST_CASE("zero network maps everything to zero") {
  const MlpScoreNet net = zero_net({3, 128, 128, 128, 2});
  const auto [s1, s2] = mlp_forward(net, 1.7, -0.3, 0.5);
  // softplus(0) = log 2 propagates but the zero output layer kills it.
  CHECK(s1 == 0.0);
  CHECK(s2 == 0.0);
}

TEST_CASE("forward pass is deterministic") {
  RngStream rng(61);
  const MlpScoreNet net = make_mlp_score_net(rng, 61);
  const auto [a1, a2] = mlp_forward(net, 0.4, -1.2, 1.1);
  const auto [b1, b2] = mlp_forward(net, 0.4, -1.2, 1.1);
  CHECK(a1 == b1);
  CHECK(a2 == b2);
}

TEST_CASE("single-unit path matches the hand-computed softplus chain") {
  MlpScoreNet net = zero_net({3, 1, 2});
  net.weights[0](0, 0) = 1.0;  // picks up r1
  net.weights[1](0, 0) = 1.0;  // first output reads the hidden unit
  const auto [s1, s2] = mlp_forward(net, 1.0, 9.9, 2.2);
  CHECK(s1 == doctest::Approx(std::log1p(std::exp(1.0))).epsilon(1e-12));
  CHECK(s1 == doctest::Approx(1.313262).epsilon(1e-6));
  CHECK(s2 == 0.0);
}

TEST_CASE("dsm loss of the zero network is the chi-square mean") {
  const MlpScoreNet net = zero_net({3, 8, 2});
  RngStream rng(62);
  const int batch = 100'000;
  DsmBatch b;
  b.x0 = sample_pairs(rng, batch, {1.0, 0.9});
  b.sigma = Vector::Ones(batch);
  b.z.resize(2, batch);
  for (int j = 0; j < batch; ++j) {
    b.z(0, j) = rng.gaussian();
    b.z(1, j) = rng.gaussian();
  }
  // With sigma = 1 the loss reduces to E||z||^2 = 2.
  CHECK(dsm_loss(net, b) == doctest::Approx(2.0).epsilon(0.02));
}

TEST_CASE("residual cancellation gives zero loss") {
  const MlpScoreNet net = zero_net({3, 8, 2});
  DsmBatch b;
  b.x0 = Matrix::Ones(2, 4);
  b.z = Matrix::Zero(2, 4);  // target -z/sigma^2 = 0 = net output
  b.sigma = Vector::Ones(4);
  CHECK(dsm_loss(net, b) == 0.0);
}

TEST_CASE("the analytic score is a better scorer than the zero network") {
  const PairwiseGaussianParams p{1.0, 0.9};
  RngStream rng(63);
  const int batch = 50'000;
  double loss_zero = 0.0, loss_true = 0.0;
  for (int j = 0; j < batch; ++j) {
    const Matrix x0 = sample_pairs(rng, 1, p);
    const double sigma = 0.3 + 2.0 * rng.uniform01();
    const double s2 = sigma * sigma;
    Vector z(2);
    z << sigma * rng.gaussian(), sigma * rng.gaussian();
    Vector r(2);
    r << x0(0, 0) + z[0], x0(1, 0) + z[1];
    const Vector truth = score_pairwise_gaussian(r, s2, p);
    loss_zero += (z / s2).squaredNorm();
    loss_true += (truth + z / s2).squaredNorm();
  }
  CHECK(loss_true >= 0.0);
  CHECK(loss_true < loss_zero);
}

TEST_CASE("backprop gradient matches central finite differences") {
  RngStream rng(64);
  MlpScoreNet net = make_mlp_score_net(rng, 64, {3, 24, 16, 2});
  DsmBatch b;
  b.x0 = sample_pairs(rng, 16, {1.0, 0.5});
  b.sigma.resize(16);
  b.z.resize(2, 16);
  for (int j = 0; j < 16; ++j) {
    b.sigma[j] = 0.2 + rng.uniform01();
    b.z(0, j) = b.sigma[j] * rng.gaussian();
    b.z(1, j) = b.sigma[j] * rng.gaussian();
  }
  const MlpGradients grads = dsm_gradient(net, b);
  const double h = 1e-5;
  int checked = 0;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    for (Index i = 0; i < net.weights[l].rows(); ++i)
      for (Index j = 0; j < net.weights[l].cols(); ++j) {
        const double saved = net.weights[l](i, j);
        net.weights[l](i, j) = saved + h;
        const double up = dsm_loss(net, b);
        net.weights[l](i, j) = saved - h;
        const double dn = dsm_loss(net, b);
        net.weights[l](i, j) = saved;
        const double fd = (up - dn) / (2.0 * h);
        CHECK(grads.weights[l](i, j) ==
              doctest::Approx(fd).epsilon(1e-4).scale(std::max(1.0, std::abs(fd))));
        ++checked;
      }
    for (Index i = 0; i < net.biases[l].size(); ++i) {
      const double saved = net.biases[l][i];
      net.biases[l][i] = saved + h;
      const double up = dsm_loss(net, b);
      net.biases[l][i] = saved - h;
      const double dn = dsm_loss(net, b);
      net.biases[l][i] = saved;
      const double fd = (up - dn) / (2.0 * h);
      CHECK(grads.biases[l][i] ==
            doctest::Approx(fd).epsilon(1e-4).scale(std::max(1.0, std::abs(fd))));
      ++checked;
    }
  }
  CHECK(checked >= 500);
}

TEST_CASE("zero residual means zero gradient") {
  const MlpScoreNet net = zero_net({3, 4, 2});
  DsmBatch b;
  b.x0 = Matrix::Ones(2, 3);
  b.z = Matrix::Zero(2, 3);
  b.sigma = Vector::Ones(3);
  const MlpGradients grads = dsm_gradient(net, b);
  for (const auto& g : grads.weights) CHECK(g.norm() == 0.0);
  for (const auto& g : grads.biases) CHECK(g.norm() == 0.0);
}

TEST_CASE("duplicating the batch leaves the mean gradient unchanged") {
  RngStream rng(65);
  const MlpScoreNet net = make_mlp_score_net(rng, 65, {3, 6, 2});
  DsmBatch b;
  b.x0 = sample_pairs(rng, 8, {1.0, 0.4});
  b.sigma = Vector::Constant(8, 0.9);
  b.z.resize(2, 8);
  for (int j = 0; j < 8; ++j) {
    b.z(0, j) = 0.9 * rng.gaussian();
    b.z(1, j) = 0.9 * rng.gaussian();
  }
  DsmBatch doubled;
  doubled.x0.resize(2, 16);
  doubled.x0 << b.x0, b.x0;
  doubled.z.resize(2, 16);
  doubled.z << b.z, b.z;
  doubled.sigma.resize(16);
  doubled.sigma << b.sigma, b.sigma;
  const MlpGradients g1 = dsm_gradient(net, b);
  const MlpGradients g2 = dsm_gradient(net, doubled);
  for (std::size_t l = 0; l < g1.weights.size(); ++l)
    CHECK((g1.weights[l] - g2.weights[l]).norm() < 1e-14);
}

TEST_CASE("adam: zero gradient from a fresh state is a no-op") {
  MlpScoreNet net = zero_net({1, 1});
  net.weights[0](0, 0) = 0.7;
  MlpGradients grads;
  grads.weights = {Matrix::Zero(1, 1)};
  grads.biases = {Vector::Zero(1)};
  AdamState state = make_adam_state(net);
  adam_step(net, grads, state, 0.1);
  CHECK(net.weights[0](0, 0) == 0.7);
}

TEST_CASE("adam: first step is approximately a signed lr step") {
  MlpScoreNet net = zero_net({1, 1});
  net.weights[0](0, 0) = 1.0;
  MlpGradients grads;
  grads.weights = {Matrix::Constant(1, 1, 0.37)};
  grads.biases = {Vector::Zero(1)};
  AdamState state = make_adam_state(net);
  adam_step(net, grads, state, 0.01);
  CHECK(net.weights[0](0, 0) == doctest::Approx(1.0 - 0.01).epsilon(1e-5));
}

TEST_CASE("adam drives a scalar quadratic toward zero") {
  MlpScoreNet net = zero_net({1, 1});
  net.weights[0](0, 0) = 1.0;
  AdamState state = make_adam_state(net);
  double prev = 1.0;
  for (int t = 0; t < 100; ++t) {
    MlpGradients grads;
    grads.weights = {Matrix::Constant(1, 1, 2.0 * net.weights[0](0, 0))};
    grads.biases = {Vector::Zero(1)};
    adam_step(net, grads, state, 0.1);
    const double w = net.weights[0](0, 0);
    // Monotone descent until the iterate is well inside the basin; after
    // that Adam hunts around the minimum but stays bounded.
    if (std::abs(prev) > 0.5) CHECK(std::abs(w) <= std::abs(prev) + 1e-12);
    prev = w;
  }
  CHECK(std::abs(net.weights[0](0, 0)) < 0.5);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 1000, 1e-3) == doctest::Approx(1e-3));
  CHECK(cosine_lr(1000, 1000, 1e-3) == doctest::Approx(0.0).epsilon(1e-18));
  CHECK(cosine_lr(500, 1000, 1e-3) == doctest::Approx(0.5e-3));
}

TEST_CASE("zero-iteration training returns the initialized net") {
  const PairwiseGaussianParams p{1.0, 0.9};
  DsmConfig config;
  config.iterations = 0;
  config.seed = 99;
  auto sampler = [&](RngStream& rng, int count) { return sample_pairs(rng, count, p); };
  const auto [net, report] = train_dsm(sampler, config);
  CHECK(report.checkpoints.empty());

  RngStream root(99);
  RngStream init = root.split("init");
  const MlpScoreNet fresh = make_mlp_score_net(init, 99, config.arch);
  for (std::size_t l = 0; l < net.weights.size(); ++l)
    CHECK((net.weights[l] - fresh.weights[l]).norm() == 0.0);
}

TEST_CASE("training is bitwise deterministic") {
  const PairwiseGaussianParams p{1.0, 0.9};
  DsmConfig config;
  config.iterations = 60;
  config.batch = 16;
  config.seed = 7;
  config.checkpoint_every = 20;
  auto sampler = [&](RngStream& rng, int count) { return sample_pairs(rng, count, p); };
  const auto [n1, r1] = train_dsm(sampler, config);
  const auto [n2, r2] = train_dsm(sampler, config);
  for (std::size_t l = 0; l < n1.weights.size(); ++l) {
    CHECK((n1.weights[l] - n2.weights[l]).norm() == 0.0);
    CHECK((n1.biases[l] - n2.biases[l]).norm() == 0.0);
  }
  CHECK(r1.final_loss == r2.final_loss);
  REQUIRE(r1.checkpoints.size() == r2.checkpoints.size());
  CHECK(r1.checkpoints.back().second == r2.checkpoints.back().second);
}

TEST_CASE("short training run already beats the untrained score by 10x") {
  const PairwiseGaussianParams p{1.0, 0.9};
  DsmConfig config;
  config.iterations = 3000;
  config.batch = 128;
  config.seed = 5;
  auto sampler = [&](RngStream& rng, int count) { return sample_pairs(rng, count, p); };

  RngStream root(config.seed);
  RngStream init = root.split("init");
  const MlpScoreNet fresh = make_mlp_score_net(init, config.seed, config.arch);
  const double err_init = score_rel_rms(fresh, p, 20'000, 1234);

  const auto [net, report] = train_dsm(sampler, config);
  CHECK_FALSE(report.aborted);
  const double err_trained = score_rel_rms(net, p, 20'000, 1234);
  MESSAGE("rel RMS: init ", err_init, " trained ", err_trained);
  CHECK(err_trained * 10.0 <= err_init);

  // Learned Fisher sanity at sigma = 1: per-pair E||s||^2 within 10% of the
  // 2x2 oracle Tr((Sigma + I)^-1).
  RngStream rng(66);
  const int draws = 20'000;
  double fisher = 0.0;
  for (int i = 0; i < draws; ++i) {
    const Matrix x0 = sample_pairs(rng, 1, p);
    const auto [s1, s2] =
        mlp_forward(net, x0(0, 0) + rng.gaussian(), x0(1, 0) + rng.gaussian(), 1.0);
    fisher += s1 * s1 + s2 * s2;
  }
  fisher /= draws;
  Matrix c(2, 2);
  c << 2.0, 0.9, 0.9, 2.0;
  CHECK(fisher == doctest::Approx(c.inverse().trace()).epsilon(0.10));

  // Whole-signal adapter agrees with the pair interface. Not bit-equal: the
  // batched matrix product may round differently than the single-column one.
  const ScoreModel model = make_learned_pairwise_model(net);
  Vector x(4);
  x << 0.3, -0.2, 1.4, 0.8;
  const Vector s = model.score(x, 1.0, nullptr);
  const auto [p1, p2] = mlp_forward(net, 0.3, -0.2, 1.0);
  CHECK(s[0] == doctest::Approx(p1).epsilon(1e-12));
  CHECK(s[1] == doctest::Approx(p2).epsilon(1e-12));
}

TEST_CASE("weight files round trip bit-exactly") {
  RngStream rng(67);
  const MlpScoreNet net = make_mlp_score_net(rng, 67, {3, 9, 5, 2});
  const auto path = std::filesystem::temp_directory_path() / "scvamp_weights_test.json";
  save_weights(net, path);
  const MlpScoreNet loaded = load_weights(path);
  CHECK(loaded.arch == net.arch);
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    CHECK((loaded.weights[l] - net.weights[l]).norm() == 0.0);
    CHECK((loaded.biases[l] - net.biases[l]).norm() == 0.0);
  }
  const auto [a1, a2] = mlp_forward(net, 0.2, 0.4, 1.3);
  const auto [b1, b2] = mlp_forward(loaded, 0.2, 0.4, 1.3);
  CHECK(a1 == b1);  // 0 ulp
  CHECK(a2 == b2);
  std::filesystem::remove(path);
}

TEST_CASE("truncated weight files are rejected") {
  RngStream rng(68);
  const MlpScoreNet net = make_mlp_score_net(rng, 68, {3, 4, 2});
  const auto path = std::filesystem::temp_directory_path() / "scvamp_weights_trunc.json";
  save_weights(net, path);
  std::string text;
  {
    std::ifstream in(path);
    text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  {
    std::ofstream out(path);
    out << text.substr(0, text.size() / 2);
  }
  CHECK_THROWS_AS(load_weights(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("width mismatches name the offending layer") {
  RngStream rng(69);
  const MlpScoreNet net = make_mlp_score_net(rng, 69, {3, 4, 2});
  const auto path = std::filesystem::temp_directory_path() / "scvamp_weights_dim.json";
  save_weights(net, path);
  std::string text;
  {
    std::ifstream in(path);
    text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  // Declare a different hidden width than the stored data provides.
  const auto pos = text.find("[3, 4, 2]");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 9, "[3, 5, 2]");
  {
    std::ofstream out(path);
    out << text;
  }
  try {
    (void)load_weights(path);
    FAIL("expected a dimension error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("layer") != std::string::npos);
  }
  std::filesystem::remove(path);
}
