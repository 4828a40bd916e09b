#include <cmath>

#include "eegssm/errors.hpp"
#include "eegssm/log.hpp"
#include "eegssm/models.hpp"

namespace eegssm::models::detail {

namespace {

Rng model_rng(const ModelSpec& spec) { return Rng(derive_seed(spec.seed, {hash_string(kind_name(spec.kind))})); }

// Stages of conv('same') -> batch norm -> GELU -> average pool (stride 2),
// then global average pooling and a linear head.
class Cnn final : public SequenceClassifier {
 public:
  explicit Cnn(const ModelSpec& spec) : SequenceClassifier(spec) {
    Rng rng = model_rng(spec);
    Index in = spec.in_channels;
    for (std::size_t s = 0; s < spec.channels.size(); ++s) {
      const Index out = spec.channels[s];
      const std::string p = "conv" + std::to_string(s);
      params_.add(p + ".weight", rng.normal_matrix(out, in * spec.kernel, std::sqrt(1.0 / static_cast<double>(in * spec.kernel))));
      params_.add(p + ".bias", Matrix::Zero(out, 1));
      add_norm(params_, "bn" + std::to_string(s), out, true);
      in = out;
    }
    add_linear(params_, rng, "head", in, spec.num_classes);
  }

  Index min_length() const override {
    Index field = 1, jump = 1;
    for (std::size_t s = 0; s < spec_.channels.size(); ++s) {
      field += (spec_.kernel - 1) * jump + jump;
      jump *= 2;
    }
    return field;
  }

  ad::Var forward(ad::Graph& g, const Matrix& x, Index batch, const ad::Mode& mode) override {
    const Index t = x.cols() / batch;
    if (t < min_length())
      throw ShapeError("cnn: window of " + std::to_string(t) + " samples is below the receptive field of " +
                       std::to_string(min_length()));
    ad::Var h = g.input(x, false, batch);
    for (std::size_t s = 0; s < spec_.channels.size(); ++s) {
      const std::string p = "conv" + std::to_string(s);
      h = ad::conv1d_same(h, g.parameter(params_.at(p + ".weight")), g.parameter(params_.at(p + ".bias")), spec_.kernel);
      h = ad::avg_pool2(ad::gelu(batch_norm(g, params_, "bn" + std::to_string(s), h, mode)));
    }
    return linear(g, params_, "head", ad::mean_time(h));
  }
};

// Stacked bidirectional LSTM; directions are concatenated between layers,
// mean-pooled over time at the end.
class Lstm final : public SequenceClassifier {
 public:
  explicit Lstm(const ModelSpec& spec) : SequenceClassifier(spec) {
    Rng rng = model_rng(spec);
    const Index h = spec.hidden;
    for (Index l = 0; l < spec.layers; ++l) {
      const Index in = l == 0 ? spec.in_channels : 2 * h;
      for (const char* dir : {"fwd", "bwd"}) {
        const std::string p = "lstm" + std::to_string(l) + "." + dir;
        add_linear(params_, rng, p + ".ih", in, 4 * h);
        params_.add(p + ".hh", rng.normal_matrix(4 * h, h, std::sqrt(1.0 / static_cast<double>(h))));
      }
    }
    add_linear(params_, rng, "head", 2 * h, spec.num_classes);
  }

  ad::Var forward(ad::Graph& g, const Matrix& x, Index batch, const ad::Mode& mode) override {
    ad::Var h = g.input(x, false, batch);
    for (Index l = 0; l < spec_.layers; ++l) {
      const std::string p = "lstm" + std::to_string(l);
      ad::Var f = ad::lstm_recurrence(linear(g, params_, p + ".fwd.ih", h), g.parameter(params_.at(p + ".fwd.hh")), false);
      ad::Var b = ad::lstm_recurrence(linear(g, params_, p + ".bwd.ih", h), g.parameter(params_.at(p + ".bwd.hh")), true);
      h = ad::dropout(ad::concat_rows(f, b), spec_.dropout, mode);
    }
    return linear(g, params_, "head", ad::mean_time(h));
  }
};

Matrix positional_encoding(Index dim, Index length) {
  Matrix pe(dim, length);
  for (Index i = 0; i < dim; ++i) {
    const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
    for (Index n = 0; n < length; ++n)
      pe(i, n) = i % 2 == 0 ? std::sin(static_cast<double>(n) * rate) : std::cos(static_cast<double>(n) * rate);
  }
  return pe;
}

// Patch tokenizer, pre-norm encoder layers each followed by batch norm, and
// learned attention pooling.
class Eegxf final : public SequenceClassifier {
 public:
  explicit Eegxf(const ModelSpec& spec) : SequenceClassifier(spec) {
    Rng rng = model_rng(spec);
    const Index d = spec.hidden;
    add_linear(params_, rng, "embed", spec.in_channels * spec.patch, d, spec.input_gain);
    add_norm(params_, "embed_bn", d, true);
    for (Index l = 0; l < spec.layers; ++l) {
      const std::string p = "layer" + std::to_string(l);
      add_norm(params_, p + ".ln1", d, false);
      for (const char* m : {".q", ".k", ".v", ".o"}) add_linear(params_, rng, p + m, d, d);
      add_norm(params_, p + ".ln2", d, false);
      add_linear(params_, rng, p + ".ff1", d, spec.feedforward);
      add_linear(params_, rng, p + ".ff2", spec.feedforward, d);
      add_norm(params_, p + ".bn", d, true);
    }
    params_.add("pool.weight", rng.normal_matrix(d, 1, std::sqrt(1.0 / static_cast<double>(d))));
    add_linear(params_, rng, "head", d, spec.num_classes);
  }

  Index min_length() const override { return spec_.patch; }

  ad::Var forward(ad::Graph& g, const Matrix& x, Index batch, const ad::Mode& mode) override {
    const Index t = x.cols() / batch;
    const Index kept = t - t % spec_.patch;
    if (kept < spec_.patch) throw ShapeError("eegxf: window shorter than one patch");
    Matrix trimmed;
    const Matrix* in = &x;
    if (kept != t) {
      warn("eegxf: window of " + std::to_string(t) + " samples truncated to " + std::to_string(kept));
      trimmed.resize(x.rows(), batch * kept);
      for (Index b = 0; b < batch; ++b) trimmed.middleCols(b * kept, kept) = x.middleCols(b * t, kept);
      in = &trimmed;
    }
    const Index tokens = kept / spec_.patch;
    ad::Var h = ad::patchify(g.input(*in, false, batch), spec_.patch);
    h = batch_norm(g, params_, "embed_bn", ad::relu(linear(g, params_, "embed", h)), mode);
    h = ad::add(h, g.constant(positional_encoding(spec_.hidden, tokens).replicate(1, batch), batch));
    for (Index l = 0; l < spec_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l);
      ad::Var z = layer_norm(g, params_, p + ".ln1", h);
      ad::Var a = ad::multi_head_attention(linear(g, params_, p + ".q", z), linear(g, params_, p + ".k", z),
                                           linear(g, params_, p + ".v", z), spec_.heads);
      h = ad::add(h, ad::dropout(linear(g, params_, p + ".o", a), spec_.dropout, mode));
      z = layer_norm(g, params_, p + ".ln2", h);
      z = linear(g, params_, p + ".ff2", ad::gelu(linear(g, params_, p + ".ff1", z)));
      h = ad::add(h, ad::dropout(z, spec_.dropout, mode));
      h = batch_norm(g, params_, p + ".bn", h, mode);
    }
    return linear(g, params_, "head", ad::attention_pool(h, g.parameter(params_.at("pool.weight"))));
  }
};

}  // namespace

std::unique_ptr<SequenceClassifier> make_cnn(const ModelSpec& spec) { return std::make_unique<Cnn>(spec); }
std::unique_ptr<SequenceClassifier> make_lstm(const ModelSpec& spec) { return std::make_unique<Lstm>(spec); }
std::unique_ptr<SequenceClassifier> make_eegxf(const ModelSpec& spec) { return std::make_unique<Eegxf>(spec); }

}  // namespace eegssm::models::detail
