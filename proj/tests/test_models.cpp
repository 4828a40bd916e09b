#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "eegssm/errors.hpp"
#include "eegssm/grad_check.hpp"
#include "eegssm/log.hpp"
#include "eegssm/models.hpp"
#include "eegssm/ssm.hpp"
#include "oracles.hpp"

using namespace eegssm;
using namespace eegssm::models;

namespace {

const std::vector<Kind> all_kinds{Kind::s5, Kind::s4, Kind::cnn, Kind::lstm, Kind::eegxf};

Index ssm_direction_params(Index p, Index h) { return 4 * p * h + 3 * p + h; }

ssm::SsmVars leaves(ad::Graph& g, ParameterSet& ps, const std::string& prefix) {
  auto leaf = [&](const char* n) { return g.parameter(ps.at(prefix + n)); };
  return {leaf(".log_neg_real"), leaf(".imag"), leaf(".log_dt"), leaf(".b_re"),
          leaf(".b_im"),         leaf(".c_re"), leaf(".c_im"),   leaf(".d")};
}

}  // namespace

TEST_CASE("count_params small layers") {
  ParameterSet ps;
  Rng rng(0);
  detail::add_linear(ps, rng, "fc", 4, 3);
  CHECK(ps.count_trainable() == 15);

  ModelSpec conv = ModelSpec::tiny(Kind::cnn);
  conv.in_channels = 2;
  conv.channels = {3};
  conv.kernel = 5;
  conv.num_classes = 2;
  // conv 2*3*5+3, batch norm 2*3, head 3*2+2.
  CHECK(make_model(conv)->count_params() == 33 + 6 + 8);
  ParameterSet conv_only;
  conv_only.add("w", Matrix::Zero(3, 2 * 5));
  conv_only.add("b", Matrix::Zero(3, 1));
  CHECK(conv_only.count_trainable() == 33);
}

TEST_CASE("paper-size parameter budgets") {
  const Index s5 = make_model(ModelSpec::paper(Kind::s5))->count_params();
  const Index cnn = make_model(ModelSpec::paper(Kind::cnn))->count_params();
  const Index h = 192, p = 32, blocks = 3;
  const Index s5_formula = (64 * h + h) + blocks * (2 * ssm_direction_params(p, h) + 2 * h) + (h * 4 + 4);
  CHECK(s5 == s5_formula);
  CHECK(s5 == 163588);
  CHECK(s5 >= 155000);
  CHECK(s5 <= 210000);
  const Index cnn_formula = (64 * 256 * 11 + 256) + 2 * 256 + (256 * 512 * 11 + 512) + 2 * 512 +
                            (512 * 512 * 11 + 512) + 2 * 512 + (512 * 4 + 4);
  CHECK(cnn == cnn_formula);
  CHECK(cnn >= 3500000);
  CHECK(cnn <= 5300000);
  CHECK(static_cast<double>(s5) <= 0.1 * static_cast<double>(cnn));
  CHECK(make_model(ModelSpec::paper(Kind::s4))->count_params() == s5);
}

TEST_CASE("every paper-size model maps (B, 64, T) to (B, 4)") {
  Rng rng(1);
  const Index batch = 2, t = 2000;
  const Matrix x = rng.normal_matrix(64, batch * t);
  for (Kind k : all_kinds) {
    CAPTURE(kind_name(k));
    auto m = make_model(ModelSpec::paper(k));
    const Matrix z = m->logits(x, batch);
    CHECK(z.rows() == 4);
    CHECK(z.cols() == batch);
    CHECK(z.allFinite());
    const Matrix p = m->predict_proba(x, batch);
    CHECK((p.colwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("S5 classifier accepts variable lengths without reconfiguration") {
  auto m = make_model(ModelSpec::paper(Kind::s5));
  Rng rng(2);
  for (Index t : {512, 2000, 8192}) {
    const Matrix z = m->logits(rng.normal_matrix(64, t), 1);
    CHECK(z.rows() == 4);
    CHECK(z.allFinite());
  }
  const Matrix x = rng.normal_matrix(64, 300);
  CHECK(m->logits(x, 1) == m->logits(x, 1));
}

TEST_CASE("initialization is deterministic per seed") {
  for (Kind k : all_kinds) {
    CAPTURE(kind_name(k));
    ModelSpec spec = ModelSpec::desk(k);
    spec.seed = 11;
    auto a = make_model(spec), b = make_model(spec);
    REQUIRE(a->params().size() == b->params().size());
    bool any_diff = false;
    spec.seed = 12;
    auto c = make_model(spec);
    for (std::size_t i = 0; i < a->params().size(); ++i) {
      CHECK(a->params()[i].value == b->params()[i].value);
      any_diff = any_diff || a->params()[i].value != c->params()[i].value;
    }
    CHECK(any_diff);
  }
}

TEST_CASE("spec JSON round trip and validation") {
  for (Kind k : all_kinds) {
    const ModelSpec s = ModelSpec::desk(k);
    const ModelSpec r = nlohmann::json(s).get<ModelSpec>();
    CHECK(nlohmann::json(r) == nlohmann::json(s));
  }
  CHECK_THROWS_AS(nlohmann::json({{"kind", "s5"}, {"hiden", 3}}).get<ModelSpec>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json({{"kind", "mamba"}}).get<ModelSpec>(), ConfigError);
  CHECK(nlohmann::json({{"kind", "lstm"}}).get<ModelSpec>().hidden == 128);
}

TEST_CASE("s5_block contracts") {
  ParameterSet ps;
  const Index h = 6, p = 4, t = 40;
  auto add = [&](const std::string& prefix, const ssm::S5LayerParams& q) {
    ps.add(prefix + ".log_neg_real", q.log_neg_real);
    ps.add(prefix + ".imag", q.imag);
    ps.add(prefix + ".log_dt", q.log_dt);
    ps.add(prefix + ".b_re", q.B.real());
    ps.add(prefix + ".b_im", q.B.imag());
    ps.add(prefix + ".c_re", q.C.real());
    ps.add(prefix + ".c_im", q.C.imag());
    ps.add(prefix + ".d", q.D);
  };
  add("a", ssm::init_s5(p, h, 1));
  add("b", ssm::init_s5(p, h, 2));
  Rng rng(3);
  ps.add("gamma", Matrix::Ones(h, 1) + 0.1 * rng.normal_matrix(h, 1));
  ps.add("beta", 0.1 * rng.normal_matrix(h, 1));
  const Matrix x = rng.normal_matrix(h, t);

  auto run = [&](const Matrix& in, const char* f, const char* b) {
    ad::Graph g;
    return ssm::s5_block(g.input(in, false), leaves(g, ps, f), leaves(g, ps, b), g.parameter(ps.at("gamma")),
                         g.parameter(ps.at("beta")), 0.0, ad::Mode{})
        .value();
  };

  SUBCASE("time reversal with swapped directions") {
    const Matrix y = run(x, "a", "b");
    const Matrix yr = run(x.rowwise().reverse(), "b", "a");
    CHECK((yr.rowwise().reverse() - y).cwiseAbs().maxCoeff() <= 1e-8);
  }
  SUBCASE("zero readout leaves only the residual") {
    for (const char* d : {"a", "b"}) {
      ps.at(std::string(d) + ".c_re").value.setZero();
      ps.at(std::string(d) + ".c_im").value.setZero();
      ps.at(std::string(d) + ".d").value.setZero();
    }
    CHECK(run(x, "a", "b") == x);
  }
  SUBCASE("paper-width shape") {
    ParameterSet wide;
    ps = wide;
    add("a", ssm::init_s5(32, 192, 4));
    add("b", ssm::init_s5(32, 192, 5));
    ps.add("gamma", Matrix::Ones(192, 1));
    ps.add("beta", Matrix::Zero(192, 1));
    const Matrix y = run(rng.normal_matrix(192, 500), "a", "b");
    CHECK(y.rows() == 192);
    CHECK(y.cols() == 500);
  }
}

TEST_CASE("attention pooling") {
  Rng rng(4);
  const Matrix x = rng.normal_matrix(5, 9);
  const Vector uniform = ad::attention_pool_weights(x, Vector::Zero(5));
  CHECK((uniform.array() - 1.0 / 9.0).abs().maxCoeff() <= 1e-15);
  ad::Graph g;
  const Matrix pooled = ad::attention_pool(g.input(x, false), g.constant(Matrix::Zero(5, 1))).value();
  CHECK((pooled.col(0) - x.rowwise().mean()).cwiseAbs().maxCoeff() <= 1e-14);
  const Matrix one = rng.normal_matrix(5, 1);
  CHECK(ad::attention_pool(g.input(one, false), g.constant(rng.normal_matrix(5, 1))).value() == one);
  for (int i = 0; i < 20; ++i) {
    const Vector w = ad::attention_pool_weights(rng.normal_matrix(5, 30), rng.normal_matrix(5, 1).col(0) * 3.0);
    CHECK(std::abs(w.sum() - 1.0) <= 1e-12);
  }
  const Matrix probs = ad::attention_probabilities(rng.normal_matrix(8, 12), rng.normal_matrix(8, 12));
  CHECK((probs.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-10);
}

TEST_CASE("baseline specifics") {
  Rng rng(5);
  SUBCASE("lstm with zero input and zero biases returns the head bias") {
    auto m = make_model(ModelSpec::desk(Kind::lstm));
    m->params().at("head.bias").value = rng.normal_matrix(4, 1);
    const Matrix z = m->logits(Matrix::Zero(64, 2 * 500), 2);
    CHECK(z.col(0) == m->params().at("head.bias").value.col(0));
    CHECK(z.col(1) == m->params().at("head.bias").value.col(0));
  }
  SUBCASE("cnn rejects windows below its receptive field") {
    auto m = make_model(ModelSpec::desk(Kind::cnn));
    CHECK(m->min_length() == 64);
    CHECK_THROWS_AS(m->logits(rng.normal_matrix(64, 63), 1), ShapeError);
    CHECK_NOTHROW(m->logits(rng.normal_matrix(64, 64), 1));
  }
  SUBCASE("eegxf truncates ragged windows with a warning") {
    auto m = make_model(ModelSpec::desk(Kind::eegxf));
    std::vector<std::string> warnings;
    set_warning_handler([&](const std::string& w) { warnings.push_back(w); });
    const Matrix x = rng.normal_matrix(64, 2 * 37);
    Matrix cut(64, 2 * 32);
    cut << x.middleCols(0, 32), x.middleCols(37, 32);
    const Matrix a = m->logits(x, 2);
    set_warning_handler(nullptr);
    CHECK(warnings.size() == 1);
    CHECK(a == m->logits(cut, 2));
    set_warning_handler({});
  }
  SUBCASE("eegxf input projection has doubled fan-in variance") {
    auto m = make_model(ModelSpec::paper(Kind::eegxf));
    const Matrix& w = m->params().at("embed.weight").value;
    const double var = w.array().square().mean() - std::pow(w.mean(), 2);
    const double ratio = var * static_cast<double>(w.cols());
    CHECK(ratio >= 1.8);
    CHECK(ratio <= 2.2);
  }
}

TEST_CASE("gradient check on tiny configurations") {
  for (Kind k : all_kinds) {
    CAPTURE(kind_name(k));
    ModelSpec spec = ModelSpec::tiny(k);
    spec.seed = 7;
    if (k == Kind::s5) spec.state = 8;
    auto m = make_model(spec);
    // Longer timescales so the check sees nontrivial memory.
    for (auto& p : m->params())
      if (p.name.ends_with("log_dt")) p.value.setConstant(std::log(0.3));
    Rng rng(8);
    const Index batch = 2, t = 32;
    const Matrix x = rng.normal_matrix(spec.in_channels, batch * t);
    const std::vector<int> labels{0, 2};
    for (bool training : {false, true}) {
      const auto r = grad_check(
          m->params(),
          [&](ad::Graph& g) { return ad::cross_entropy(m->forward(g, x, batch, ad::Mode{training, nullptr}), labels); },
          1e-5);
      INFO(r.worst_parameter, " training=", training);
      CHECK(r.max_relative_error <= 1e-4);
    }
  }
}
