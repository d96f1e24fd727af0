// Graph builders for the four forecasters and their parameter layouts.
#include "architectures.hpp"

#include <cmath>
#include <string>

namespace fedcast {
namespace {

using ad::Var;

void dense(std::vector<ParamDecl>& out, const std::string& name, std::size_t in,
           std::size_t width) {
  out.push_back({name + ".weight", {in, width}, InitKind::kWeight, in});
  out.push_back({name + ".bias", {width}, InitKind::kZero, in});
}

void batchnorm(std::vector<ParamDecl>& out, const std::string& name, std::size_t ch) {
  out.push_back({name + ".gamma", {ch}, InitKind::kOne, 0, true, true});
  out.push_back({name + ".beta", {ch}, InitKind::kZero, 0, true, true});
  out.push_back({name + ".running_mean", {ch}, InitKind::kZero, 0, true, false});
  out.push_back({name + ".running_var", {ch}, InitKind::kOne, 0, true, false});
}

void lstm_layer(std::vector<ParamDecl>& out, const std::string& name, std::size_t in,
                std::size_t hidden) {
  out.push_back({name + ".w_ih", {in, 4 * hidden}, InitKind::kWeight, hidden});
  out.push_back({name + ".w_hh", {hidden, 4 * hidden}, InitKind::kWeight, hidden});
  out.push_back({name + ".bias", {4 * hidden}, InitKind::kLstmBias, hidden});
}

void conv(std::vector<ParamDecl>& out, const std::string& name, std::size_t cin,
          std::size_t cout) {
  out.push_back({name + ".weight", {cout, cin, 3, 3}, InitKind::kWeight, cin * 9});
  out.push_back({name + ".bias", {cout}, InitKind::kZero, cin * 9});
}

Var dense_apply(const GraphParams& p, const std::string& name, const Var& x) {
  return ad::add_bias(ad::matmul(x, p.var(name + ".weight")), p.var(name + ".bias"));
}

Var batchnorm_apply(const GraphParams& p, const std::string& name, const Var& x,
                    std::size_t channel_axis, bool training) {
  ad::BatchNormOptions opt;
  opt.channel_axis = channel_axis;
  opt.training = training;
  opt.running_mean = p.state(name + ".running_mean");
  opt.running_var = p.state(name + ".running_var");
  return ad::batch_norm(x, p.var(name + ".gamma"), p.var(name + ".beta"), opt);
}

// Input batch [B, T, C] laid out as a [B, 1, C, T] image.
Tensor as_image(const Tensor& inputs) {
  const std::size_t b = inputs.dim(0), t = inputs.dim(1), c = inputs.dim(2);
  Tensor img({b, 1, c, t});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t k = 0; k < c; ++k) img[(n * c + k) * t + s] = inputs[(n * t + s) * c + k];
  return img;
}

/// Runs one LSTM layer over a sequence of [B, in] steps; returns hidden states.
std::vector<Var> lstm_run(const GraphParams& p, const std::string& name,
                          const std::vector<Var>& xs, std::size_t hidden) {
  const Var& w_ih = p.var(name + ".w_ih");
  const Var& w_hh = p.var(name + ".w_hh");
  const Var& bias = p.var(name + ".bias");
  std::vector<Var> hs;
  Var h, c;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    Var z = ad::matmul(xs[t], w_ih);
    if (t > 0) z = ad::add(z, ad::matmul(h, w_hh));
    z = ad::add_bias(z, bias);
    const Var i = ad::sigmoid(ad::slice(z, 0, hidden));
    const Var f = ad::sigmoid(ad::slice(z, hidden, 2 * hidden));
    const Var g = ad::tanh(ad::slice(z, 2 * hidden, 3 * hidden));
    const Var o = ad::sigmoid(ad::slice(z, 3 * hidden, 4 * hidden));
    c = t > 0 ? ad::add(ad::mul(f, c), ad::mul(i, g)) : ad::mul(i, g);
    h = ad::mul(o, ad::tanh(c));
    hs.push_back(h);
  }
  return hs;
}

std::vector<Var> sequence_steps(const Tensor& inputs, ad::Tape& tape) {
  const std::size_t b = inputs.dim(0), t = inputs.dim(1), c = inputs.dim(2);
  const Var flat = tape.constant(inputs.reshaped({b, t * c}));
  std::vector<Var> xs;
  for (std::size_t s = 0; s < t; ++s) xs.push_back(ad::slice(flat, s * c, (s + 1) * c));
  return xs;
}

// ---- CNN ------------------------------------------------------------------

Var cnn_forward(const ModelSpec& spec, const GraphParams& p, const Tensor& inputs,
                bool training, ad::Tape& tape) {
  const std::size_t b = inputs.dim(0);
  Var x = tape.constant(as_image(inputs));
  for (std::size_t blk = 0; blk < 2; ++blk) {
    const std::string n = std::to_string(blk + 1);
    x = ad::conv2d(x, p.var("conv" + n + ".weight"), p.var("conv" + n + ".bias"));
    x = ad::leaky_relu(x, spec.leaky_slope);
    if (spec.batchnorm_at(blk)) x = batchnorm_apply(p, "bn" + n, x, 1, training);
  }
  x = ad::reshape(x, {b, spec.conv_channels * spec.channels() * spec.steps()});
  return dense_apply(p, "head", x);
}

// ---- LSTM -----------------------------------------------------------------

Var lstm_forward(const ModelSpec& spec, const GraphParams& p, const Tensor& inputs,
                 bool training, ad::Tape& tape) {
  std::vector<Var> seq = sequence_steps(inputs, tape);
  for (std::size_t l = 0; l < spec.layers; ++l) {
    seq = lstm_run(p, "lstm" + std::to_string(l), seq, spec.hidden);
  }
  Var x = seq.back();
  if (spec.batchnorm_at(0)) x = batchnorm_apply(p, "bn", x, 1, training);
  x = ad::relu(dense_apply(p, "head1", x));
  return dense_apply(p, "head2", x);
}

// ---- LSTM + CNN -------------------------------------------------------------

Var lstm_cnn_forward(const ModelSpec& spec, const GraphParams& p, const Tensor& inputs,
                     bool training, ad::Tape& tape) {
  const std::size_t b = inputs.dim(0), t = spec.steps(), hd = spec.hidden;
  const auto hs = lstm_run(p, "lstm0", sequence_steps(inputs, tape), hd);
  Var x = ad::reshape(ad::concat(hs), {b, 1, t, hd});
  x = ad::relu(ad::conv2d(x, p.var("conv.weight"), p.var("conv.bias")));
  if (spec.batchnorm_at(0)) x = batchnorm_apply(p, "bn", x, 1, training);
  x = ad::reshape(x, {b, spec.conv_channels * t * hd});
  return dense_apply(p, "head", x);
}

// ---- Transformer ----------------------------------------------------------

Var split_heads(const Var& x, std::size_t b, std::size_t t, std::size_t heads,
                std::size_t dh) {
  return ad::reshape(ad::permute_0213(ad::reshape(x, {b, t, heads, dh})), {b * heads, t, dh});
}

Var transformer_forward(const ModelSpec& spec, const GraphParams& p, const Tensor& inputs,
                        bool training, ad::Tape& tape) {
  const std::size_t b = inputs.dim(0), t = spec.steps(), c = spec.channels();
  const std::size_t d = spec.hidden, heads = spec.num_heads, dh = d / heads;
  Var x = dense_apply(p, "embed", tape.constant(inputs.reshaped({b * t, c})));
  if (spec.positional_encoding) {
    const Tensor pe = sinusoidal_encoding(t, d);
    Tensor tiled({b * t, d});
    for (std::size_t n = 0; n < b; ++n)
      std::copy(pe.data().begin(), pe.data().end(), tiled.data().begin() + n * t * d);
    x = ad::add(x, tape.constant(std::move(tiled)));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string n = "block" + std::to_string(l);
    const Var q = split_heads(dense_apply(p, n + ".q", x), b, t, heads, dh);
    const Var k = split_heads(dense_apply(p, n + ".k", x), b, t, heads, dh);
    const Var v = split_heads(dense_apply(p, n + ".v", x), b, t, heads, dh);
    const Var attn = ad::softmax(ad::scale(ad::bmm(q, k, true), inv_sqrt));
    Var ctx = ad::bmm(attn, v);  // [B*heads, T, dh]
    ctx = ad::reshape(ad::permute_0213(ad::reshape(ctx, {b, heads, t, dh})), {b * t, d});
    x = ad::add(x, dense_apply(p, n + ".out", ctx));

    Var ff = ad::relu(dense_apply(p, n + ".ff1", x));
    if (spec.batchnorm_at(l)) ff = batchnorm_apply(p, n + ".bn", ff, 1, training);
    x = ad::add(x, dense_apply(p, n + ".ff2", ff));
  }
  const Var pooled = ad::mean_axis1(ad::reshape(x, {b, t, d}));
  return dense_apply(p, "head", pooled);
}

}  // namespace

Tensor sinusoidal_encoding(std::size_t steps, std::size_t width) {
  Tensor pe({steps, width});
  for (std::size_t pos = 0; pos < steps; ++pos) {
    for (std::size_t i = 0; i < width; ++i) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * rate;
      pe.at(pos, i) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

std::vector<ParamDecl> param_layout(const ModelSpec& spec) {
  std::vector<ParamDecl> out;
  const std::size_t c = spec.channels(), t = spec.steps(), f = spec.horizon;
  switch (spec.arch) {
    case Arch::kCnn: {
      const std::size_t k = spec.conv_channels;
      conv(out, "conv1", 1, k);
      if (spec.batchnorm_at(0)) batchnorm(out, "bn1", k);
      conv(out, "conv2", k, k);
      if (spec.batchnorm_at(1)) batchnorm(out, "bn2", k);
      dense(out, "head", k * c * t, f);
      break;
    }
    case Arch::kLstm: {
      for (std::size_t l = 0; l < spec.layers; ++l) {
        lstm_layer(out, "lstm" + std::to_string(l), l == 0 ? c : spec.hidden, spec.hidden);
      }
      if (spec.batchnorm_at(0)) batchnorm(out, "bn", spec.hidden);
      dense(out, "head1", spec.hidden, spec.head_hidden);
      dense(out, "head2", spec.head_hidden, f);
      break;
    }
    case Arch::kLstmCnn: {
      lstm_layer(out, "lstm0", c, spec.hidden);
      conv(out, "conv", 1, spec.conv_channels);
      if (spec.batchnorm_at(0)) batchnorm(out, "bn", spec.conv_channels);
      dense(out, "head", spec.conv_channels * t * spec.hidden, f);
      break;
    }
    case Arch::kTransformer: {
      const std::size_t d = spec.hidden;
      dense(out, "embed", c, d);
      for (std::size_t l = 0; l < spec.layers; ++l) {
        const std::string n = "block" + std::to_string(l);
        for (const char* proj : {".q", ".k", ".v", ".out"}) dense(out, n + proj, d, d);
        dense(out, n + ".ff1", d, spec.ff_hidden);
        if (spec.batchnorm_at(l)) batchnorm(out, n + ".bn", spec.ff_hidden);
        dense(out, n + ".ff2", spec.ff_hidden, d);
      }
      dense(out, "head", d, f);
      break;
    }
  }
  return out;
}

ad::Var build_forward(const ModelSpec& spec, const GraphParams& params,
                      const Tensor& inputs, bool training, ad::Tape& tape) {
  if (inputs.rank() != 3 || inputs.dim(1) != spec.steps() ||
      inputs.dim(2) != spec.channels()) {
    throw ModelError("model input shape " + shape_to_string(inputs.shape()) +
                     " does not match spec [B," + std::to_string(spec.steps()) + "," +
                     std::to_string(spec.channels()) + "]");
  }
  if (inputs.dim(0) == 0) throw ModelError("empty batch");
  switch (spec.arch) {
    case Arch::kCnn: return cnn_forward(spec, params, inputs, training, tape);
    case Arch::kLstm: return lstm_forward(spec, params, inputs, training, tape);
    case Arch::kLstmCnn: return lstm_cnn_forward(spec, params, inputs, training, tape);
    case Arch::kTransformer: return transformer_forward(spec, params, inputs, training, tape);
  }
  throw ModelError("unknown architecture");
}

}  // namespace fedcast
