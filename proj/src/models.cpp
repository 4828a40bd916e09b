#include "eegssm/models.hpp"

#include <algorithm>

#include "eegssm/array_ops.hpp"
#include "eegssm/config_util.hpp"
#include "eegssm/errors.hpp"
#include "eegssm/ssm.hpp"

namespace eegssm::models {

namespace detail {
std::unique_ptr<SequenceClassifier> make_cnn(const ModelSpec& spec);
std::unique_ptr<SequenceClassifier> make_lstm(const ModelSpec& spec);
std::unique_ptr<SequenceClassifier> make_eegxf(const ModelSpec& spec);
}  // namespace detail

namespace {
constexpr std::pair<Kind, const char*> kind_names[] = {
    {Kind::s5, "s5"}, {Kind::s4, "s4"}, {Kind::cnn, "cnn"}, {Kind::lstm, "lstm"}, {Kind::eegxf, "eegxf"}};
}

Kind parse_kind(const std::string& name) {
  for (auto [k, n] : kind_names)
    if (name == n) return k;
  throw ConfigError("unknown model kind '" + name + "' (valid: s5, s4, cnn, lstm, eegxf)");
}

std::string kind_name(Kind kind) {
  for (auto [k, n] : kind_names)
    if (k == kind) return n;
  return "?";
}

ModelSpec ModelSpec::paper(Kind kind) {
  ModelSpec s;
  s.kind = kind;
  switch (kind) {
    case Kind::s5:
    case Kind::s4:
      break;
    case Kind::cnn:
      s.dropout = 0.0;
      break;
    case Kind::lstm:
      s.hidden = 128;
      s.layers = 2;
      s.dropout = 0.0;
      break;
    case Kind::eegxf:
      s.hidden = 128;
      s.layers = 2;
      break;
  }
  return s;
}

ModelSpec ModelSpec::desk(Kind kind) {
  ModelSpec s = paper(kind);
  s.dropout = 0.0;
  switch (kind) {
    case Kind::s5:
    case Kind::s4:
      s.hidden = 16;
      s.state = 8;
      s.layers = 2;
      break;
    case Kind::cnn:
      s.channels = {16, 32, 32};
      s.kernel = 9;
      break;
    case Kind::lstm:
      s.hidden = 16;
      break;
    case Kind::eegxf:
      s.hidden = 32;
      s.layers = 1;
      s.feedforward = 64;
      break;
  }
  return s;
}

ModelSpec ModelSpec::tiny(Kind kind) {
  ModelSpec s = desk(kind);
  s.in_channels = 3;
  s.num_classes = 3;
  switch (kind) {
    case Kind::s5:
    case Kind::s4:
      s.hidden = 4;
      s.state = 4;
      s.layers = 2;
      break;
    case Kind::cnn:
      s.channels = {3, 4, 4};
      s.kernel = 3;
      break;
    case Kind::lstm:
      s.hidden = 8;
      break;
    case Kind::eegxf:
      s.hidden = 16;
      s.heads = 2;
      s.feedforward = 16;
      break;
  }
  return s;
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"kind", kind_name(s.kind)}, {"in_channels", s.in_channels}, {"num_classes", s.num_classes},
       {"hidden", s.hidden},        {"state", s.state},             {"layers", s.layers},
       {"heads", s.heads},          {"feedforward", s.feedforward}, {"patch", s.patch},
       {"input_gain", s.input_gain}, {"channels", s.channels},      {"kernel", s.kernel},
       {"dropout", s.dropout},      {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  if (!j.is_object()) throw ConfigError("model spec must be a JSON object");
  // Start from the preset of the requested kind so partial specs are valid.
  if (j.contains("kind")) s = ModelSpec::paper(parse_kind(j.at("kind").get<std::string>()));
  const nlohmann::json full = merge_checked(j, nlohmann::json(s), "model spec");
  const std::string what = "model";
  s.kind = parse_kind(get_field<std::string>(full, "kind", what));
  s.in_channels = get_field<Index>(full, "in_channels", what);
  s.num_classes = get_field<Index>(full, "num_classes", what);
  s.hidden = get_field<Index>(full, "hidden", what);
  s.state = get_field<Index>(full, "state", what);
  s.layers = get_field<Index>(full, "layers", what);
  s.heads = get_field<Index>(full, "heads", what);
  s.feedforward = get_field<Index>(full, "feedforward", what);
  s.patch = get_field<Index>(full, "patch", what);
  s.input_gain = get_field<double>(full, "input_gain", what);
  s.channels = get_field<std::vector<Index>>(full, "channels", what);
  s.kernel = get_field<Index>(full, "kernel", what);
  s.dropout = get_field<double>(full, "dropout", what);
  s.seed = get_field<std::uint64_t>(full, "seed", what);
  if (s.in_channels < 1 || s.num_classes < 2 || s.hidden < 1 || s.state < 1 || s.layers < 1 || s.heads < 1 ||
      s.feedforward < 1 || s.patch < 1 || s.kernel < 1 || s.kernel % 2 == 0 || s.channels.empty())
    throw ConfigError("model spec: sizes must be positive and kernel odd");
  if (s.hidden % s.heads != 0) throw ConfigError("model spec: hidden must be divisible by heads");
  if (s.dropout < 0.0 || s.dropout >= 1.0) throw ConfigError("model spec: dropout must lie in [0, 1)");
}

Matrix SequenceClassifier::logits(const Matrix& x, Index batch) {
  ad::Graph g;
  return forward(g, x, batch, ad::Mode{}).value();
}

Matrix SequenceClassifier::predict_proba(const Matrix& x, Index batch) {
  Matrix z = logits(x, batch);
  for (Index b = 0; b < z.cols(); ++b) z.col(b) = softmax(z.col(b));
  return z;
}

namespace detail {

void add_linear(ParameterSet& ps, Rng& rng, const std::string& name, Index in, Index out, double gain) {
  ps.add(name + ".weight", rng.normal_matrix(out, in, std::sqrt(gain / static_cast<double>(in))));
  ps.add(name + ".bias", Matrix::Zero(out, 1));
}

ad::Var linear(ad::Graph& g, ParameterSet& ps, const std::string& name, ad::Var x) {
  return ad::add_bias(ad::matmul(g.parameter(ps.at(name + ".weight")), x), g.parameter(ps.at(name + ".bias")));
}

void add_norm(ParameterSet& ps, const std::string& name, Index dim, bool running_stats) {
  ps.add(name + ".gamma", Matrix::Ones(dim, 1));
  ps.add(name + ".beta", Matrix::Zero(dim, 1));
  if (running_stats) {
    ps.add(name + ".running_mean", Matrix::Zero(dim, 1), false);
    ps.add(name + ".running_var", Matrix::Ones(dim, 1), false);
  }
}

ad::Var layer_norm(ad::Graph& g, ParameterSet& ps, const std::string& name, ad::Var x) {
  return ad::layer_norm(x, g.parameter(ps.at(name + ".gamma")), g.parameter(ps.at(name + ".beta")));
}

ad::Var batch_norm(ad::Graph& g, ParameterSet& ps, const std::string& name, ad::Var x, const ad::Mode& mode) {
  return ad::batch_norm(x, g.parameter(ps.at(name + ".gamma")), g.parameter(ps.at(name + ".beta")),
                        ps.at(name + ".running_mean"), ps.at(name + ".running_var"), mode.training);
}

}  // namespace detail

namespace {

using namespace detail;

void add_ssm(ParameterSet& ps, const std::string& prefix, const ssm::S5LayerParams& p) {
  ps.add(prefix + ".log_neg_real", p.log_neg_real);
  ps.add(prefix + ".imag", p.imag);
  ps.add(prefix + ".log_dt", p.log_dt);
  ps.add(prefix + ".b_re", p.B.real());
  ps.add(prefix + ".b_im", p.B.imag());
  ps.add(prefix + ".c_re", p.C.real());
  ps.add(prefix + ".c_im", p.C.imag());
  ps.add(prefix + ".d", p.D);
}

ssm::SsmVars ssm_leaves(ad::Graph& g, ParameterSet& ps, const std::string& prefix) {
  auto leaf = [&](const char* n) { return g.parameter(ps.at(prefix + n)); };
  return {leaf(".log_neg_real"), leaf(".imag"), leaf(".log_dt"), leaf(".b_re"),
          leaf(".b_im"),         leaf(".c_re"), leaf(".c_im"),   leaf(".d")};
}

// Stack of bidirectional diagonal SSM blocks; `kernel_path` selects the FFT
// convolution evaluation (S4) instead of the scan (S5).
class StateSpaceClassifier final : public SequenceClassifier {
 public:
  explicit StateSpaceClassifier(const ModelSpec& spec) : SequenceClassifier(spec) {
    Rng rng(derive_seed(spec.seed, {hash_string(kind_name(spec.kind))}));
    add_linear(params_, rng, "input", spec.in_channels, spec.hidden);
    for (Index b = 0; b < spec.layers; ++b) {
      const std::string p = "block" + std::to_string(b);
      add_norm(params_, p + ".norm", spec.hidden, false);
      add_ssm(params_, p + ".fwd", ssm::init_s5(spec.state, spec.hidden, rng.next()));
      add_ssm(params_, p + ".bwd", ssm::init_s5(spec.state, spec.hidden, rng.next()));
    }
    add_linear(params_, rng, "head", spec.hidden, spec.num_classes);
  }

  ad::Var forward(ad::Graph& g, const Matrix& x, Index batch, const ad::Mode& mode) override {
    ad::Var h = linear(g, params_, "input", g.input(x, false, batch));
    for (Index b = 0; b < spec_.layers; ++b) h = block(g, "block" + std::to_string(b), h, mode);
    return linear(g, params_, "head", ad::mean_time(h));
  }

  ad::Var block(ad::Graph& g, const std::string& p, ad::Var x, const ad::Mode& mode) {
    return ssm::s5_block(x, ssm_leaves(g, params_, p + ".fwd"), ssm_leaves(g, params_, p + ".bwd"),
                         g.parameter(params_.at(p + ".norm.gamma")), g.parameter(params_.at(p + ".norm.beta")),
                         spec_.dropout, mode, spec_.kind == Kind::s4);
  }
};

}  // namespace

std::unique_ptr<SequenceClassifier> make_model(const ModelSpec& spec) {
  switch (spec.kind) {
    case Kind::s5:
    case Kind::s4:
      return std::make_unique<StateSpaceClassifier>(spec);
    case Kind::cnn:
      return detail::make_cnn(spec);
    case Kind::lstm:
      return detail::make_lstm(spec);
    case Kind::eegxf:
      return detail::make_eegxf(spec);
  }
  throw ConfigError("unknown model kind");
}

}  // namespace eegssm::models
