#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include <recunlearn/model.hpp>

#include "support/oracles.hpp"
#include "support/synth.hpp"

using namespace recunlearn;
namespace fs = std::filesystem;

namespace {

ModelParams tiny_model(int nu, int ni, int d, uint64_t seed, double reg_lambda, double init_std = 0.8) {
  ModelHyper h;
  h.embed_dim = d;
  h.reg_lambda = reg_lambda;
  h.init_std = init_std;
  h.seed = seed;
  return init_params(nu, ni, h);
}

}  // namespace

TEST_CASE("init_params shapes, determinism and distribution") {
  ModelHyper h;
  h.embed_dim = 16;
  h.init_std = 0.01;
  h.seed = 5;
  const ModelParams a = init_params(100, 50, h);
  REQUIRE(a.user_emb.rows() == 100);
  REQUIRE(a.user_emb.cols() == 16);
  REQUIRE(a.item_emb.rows() == 50);

  const ModelParams b = init_params(100, 50, h);
  REQUIRE(a.user_emb == b.user_emb);
  REQUIRE(a.item_emb == b.item_emb);

  SECTION("sample statistics match the configured spread") {
    ModelHyper big = h;
    big.embed_dim = 500;
    const ModelParams m = init_params(1500, 500, big);  // 10^6 entries total
    const double n = static_cast<double>(m.user_emb.size());
    const double mean = m.user_emb.sum() / n;
    const double sd = std::sqrt((m.user_emb.array() - mean).square().sum() / n);
    REQUIRE(std::abs(mean) < 3.0 * h.init_std / 1000.0);
    REQUIRE(std::abs(sd - h.init_std) < 0.01 * h.init_std);
  }
  SECTION("rejects bad dimensions") {
    ModelHyper bad = h;
    bad.embed_dim = 0;
    REQUIRE_THROWS_AS(init_params(1, 1, bad), std::invalid_argument);
  }
}

TEST_CASE("predict is the embedding dot product") {
  ModelParams m = tiny_model(2, 2, 2, 1, 0.0);
  m.user_emb.row(0) << 1.0, 2.0;
  m.item_emb.row(0) << 3.0, -1.0;
  REQUIRE(predict(m, 0, 0) == 1.0);

  m.user_emb.row(1).setZero();
  REQUIRE(predict(m, 1, 0) == 0.0);

  SECTION("random rows against a long-double accumulation") {
    const ModelParams r = tiny_model(30, 30, 24, 9, 0.0, 1.0);
    for (int u = 0; u < 30; ++u) {
      const double mine = predict(r, u, u);
      const double ref = oracle::slow_dot(r.user_emb.row(u).transpose(), r.item_emb.row(u).transpose());
      REQUIRE(mine == Catch::Approx(ref).margin(1e-12));
    }
  }
  SECTION("bounds are checked") {
    REQUIRE_THROWS_AS(predict(m, 2, 0), std::out_of_range);
    REQUIRE_THROWS_AS(predict(m, 0, 2), std::out_of_range);
  }
}

TEST_CASE("point_loss matches the closed form") {
  ModelParams m = tiny_model(1, 1, 2, 1, 0.0);
  m.user_emb.row(0) << 1.0, 0.0;
  m.item_emb.row(0) << 1.0, 0.0;
  REQUIRE(point_loss(m, {0, 0, 1.0}) == 0.0);     // perfect prediction, no reg
  REQUIRE(point_loss(m, {0, 0, 3.0}) == 2.0);     // error 2 -> 1/2 * 4

  m.hyper.reg_lambda = 0.1;
  m.user_emb.row(0) << 1.0, 0.0;
  m.item_emb.row(0) << 0.0, 2.0;
  REQUIRE(point_loss(m, {0, 0, 0.0}) == Catch::Approx(0.25).epsilon(1e-12));

  SECTION("total_loss is additive and zero on empty data") {
    const ModelParams r = tiny_model(10, 10, 4, 3, 0.02, 0.7);
    REQUIRE(total_loss(r, InteractionSet({}, 10, 10)) == 0.0);
    const InteractionSet data = synth::random_interactions(10, 10, 40, 8);
    double manual = 0.0;
    for (const Interaction& z : data.interactions()) manual += point_loss(r, z);
    REQUIRE(total_loss(r, data) == Catch::Approx(manual).epsilon(1e-9));
  }
  SECTION("total_loss is invariant to interaction order") {
    const ModelParams r = tiny_model(10, 10, 4, 3, 0.02, 0.7);
    const InteractionSet data = synth::random_interactions(10, 10, 40, 8);
    std::vector<Interaction> reversed(data.interactions().rbegin(), data.interactions().rend());
    const InteractionSet flipped(std::move(reversed), 10, 10);
    REQUIRE(total_loss(r, data) == Catch::Approx(total_loss(r, flipped)).epsilon(1e-12));
  }
}

TEST_CASE("grad_point agrees with finite differences of point_loss") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    ModelParams m = tiny_model(4, 4, 6, seed, 0.03, 0.9);
    const Interaction z{1, 2, 3.5};
    const PointGrad g = grad_point(m, z);

    const int d = m.dim();
    const auto loss_of = [&](const Vector& x) {
      ModelParams probe = m;
      probe.user_emb.row(z.user) = x.head(d).transpose();
      probe.item_emb.row(z.item) = x.tail(d).transpose();
      return point_loss(probe, z);
    };
    Vector x(2 * d);
    x.head(d) = m.user_emb.row(z.user).transpose();
    x.tail(d) = m.item_emb.row(z.item).transpose();
    const Vector fd = oracle::fd_gradient(loss_of, x);
    for (int k = 0; k < d; ++k) {
      REQUIRE(g.user_grad(k) == Catch::Approx(fd(k)).margin(1e-7));
      REQUIRE(g.item_grad(k) == Catch::Approx(fd(d + k)).margin(1e-7));
    }
  }

  SECTION("perfectly predicted point with no regularization has zero gradient") {
    ModelParams m = tiny_model(1, 1, 2, 1, 0.0);
    m.user_emb.row(0) << 2.0, 0.0;
    m.item_emb.row(0) << 0.5, 0.0;
    const PointGrad g = grad_point(m, {0, 0, 1.0});
    REQUIRE(g.user_grad.norm() == 0.0);
    REQUIRE(g.item_grad.norm() == 0.0);
  }
}

TEST_CASE("sgd training descends and reproduces") {
  const InteractionSet data = synth::random_interactions(30, 20, 300, 77, 1.0, 5.0);
  ModelHyper h;
  h.embed_dim = 8;
  h.learning_rate = 0.02;
  h.reg_lambda = 0.01;
  h.epochs = 25;
  h.init_std = 0.1;
  h.batch_size = 32;

  SECTION("loss goes down across seeds") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      ModelHyper hs = h;
      hs.seed = seed;
      const TrainResult r = train(data, hs);
      const double init_loss = total_loss(init_params(30, 20, hs), data);
      REQUIRE(r.epoch_losses.size() == 25);
      REQUIRE(r.epoch_losses.back() < init_loss);
    }
  }
  SECTION("same seed gives bitwise identical parameters") {
    ModelHyper hs = h;
    hs.seed = 12;
    const TrainResult a = train(data, hs);
    const TrainResult b = train(data, hs);
    REQUIRE(a.params.user_emb == b.params.user_emb);
    REQUIRE(a.params.item_emb == b.params.item_emb);
    REQUIRE(a.epoch_losses == b.epoch_losses);
  }
  SECTION("training on an empty set returns the initialization") {
    ModelHyper hs = h;
    hs.seed = 3;
    const TrainResult r = train(InteractionSet({}, 7, 7), hs);
    const ModelParams ref = init_params(7, 7, hs);
    REQUIRE(r.params.user_emb == ref.user_emb);
    REQUIRE(r.params.item_emb == ref.item_emb);
  }
  SECTION("a one-factor problem is fit accurately") {
    const InteractionSet scalar({{0, 0, 1.0}}, 1, 1);
    ModelHyper hs;
    hs.embed_dim = 1;
    hs.learning_rate = 0.05;
    hs.reg_lambda = 0.0;
    hs.epochs = 400;
    hs.init_std = 0.5;
    hs.batch_size = 1;
    hs.seed = 2;
    const TrainResult r = train(scalar, hs);
    REQUIRE(predict(r.params, 0, 0) == Catch::Approx(1.0).margin(1e-2));
  }
  SECTION("divergence raises an error that names the epoch") {
    ModelHyper hs = h;
    hs.learning_rate = 50.0;
    hs.seed = 1;
    REQUIRE_THROWS_WITH(train(data, hs), Catch::Matchers::ContainsSubstring("epoch"));
  }
}

TEST_CASE("user_hessian_block matches its definition and finite differences") {
  SECTION("empty user yields the regularization floor") {
    const ModelParams m = tiny_model(3, 3, 2, 4, 0.01);
    const InteractionSet data({{1, 0, 2.0}}, 3, 3);
    const Matrix h = user_hessian_block(m, data, 0);
    REQUIRE(h.isApprox(0.01 * Matrix::Identity(2, 2)));
  }
  SECTION("single interaction with no regularization is q q^T") {
    ModelParams m = tiny_model(1, 1, 2, 4, 0.0);
    m.item_emb.row(0) << 1.0, 1.0;
    const InteractionSet data({{0, 0, 3.0}}, 1, 1);
    const Matrix h = user_hessian_block(m, data, 0);
    Matrix expect(2, 2);
    expect << 1.0, 1.0, 1.0, 1.0;
    REQUIRE(h.isApprox(expect));
  }
  SECTION("finite differences of the restricted objective") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
      ModelParams m = tiny_model(6, 8, 5, seed, 0.02, 0.8);
      const InteractionSet data = synth::random_interactions(6, 8, 30, seed + 50);
      const int user = 2;
      if (data.user_degree(user) == 0) continue;
      const auto objective = [&](const Vector& p) {
        ModelParams probe = m;
        probe.user_emb.row(user) = p.transpose();
        double acc = 0.0;
        for (int pos : data.user_positions(user)) acc += point_loss(probe, data.at(pos));
        return acc;
      };
      const Matrix fd = oracle::fd_hessian(objective, m.user_emb.row(user).transpose());
      const Matrix mine = user_hessian_block(m, data, user);
      REQUIRE((mine - fd).cwiseAbs().maxCoeff() < 1e-4);
    }
  }
  SECTION("minimum eigenvalue is at least the regularization floor") {
    const ModelParams m = tiny_model(5, 5, 4, 7, 0.05, 1.0);
    const InteractionSet data = synth::random_interactions(5, 5, 15, 31);
    for (int u = 0; u < 5; ++u) {
      const Matrix h = user_hessian_block(m, data, u);
      Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
      REQUIRE(eig.eigenvalues().minCoeff() >= 0.05 - 1e-12);
    }
  }
}

TEST_CASE("checkpoints round trip bit-exactly") {
  ModelHyper h;
  h.embed_dim = 6;
  h.learning_rate = 0.015;
  h.reg_lambda = 0.007;
  h.epochs = 12;
  h.init_std = 0.3;
  h.batch_size = 64;
  h.seed = 0xDEADBEEFULL;
  const ModelParams m = init_params(13, 9, h);
  const std::string path =
      (fs::temp_directory_path() / "recunlearn_model_tests" / "model.ckpt").string();
  fs::create_directories(fs::path(path).parent_path());
  save_params(m, path);
  const ModelParams back = load_params(path);
  REQUIRE(back.user_emb == m.user_emb);
  REQUIRE(back.item_emb == m.item_emb);
  REQUIRE(back.hyper.learning_rate == h.learning_rate);
  REQUIRE(back.hyper.seed == h.seed);

  SECTION("garbage files are rejected") {
    const std::string bad =
        (fs::temp_directory_path() / "recunlearn_model_tests" / "bad.ckpt").string();
    std::ofstream out(bad, std::ios::binary);
    out << "not a checkpoint";
    out.close();
    REQUIRE_THROWS_WITH(load_params(bad), Catch::Matchers::ContainsSubstring("checkpoint"));
  }
}
