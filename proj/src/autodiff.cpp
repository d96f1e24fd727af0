#include "fedcast/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fedcast/kernels.hpp"

namespace fedcast::ad {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
}

Tape& same_tape(const Var& a, const Var& b) {
  require(a.valid() && b.valid(), "operation on an invalid Var");
  require(&a.tape() == &b.tape(), "operands live on different tapes");
  return a.tape();
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

// Unary elementwise op with derivative expressed via input x and output y.
template <typename Fwd, typename Deriv>
Var elementwise(const Var& a, Fwd fwd, Deriv deriv) {
  Tape& t = a.tape();
  Tensor out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, deriv](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(ia)) return;
    const auto& g = tp.grad(self);
    const auto& x = tp.value(ia);
    const auto& y = tp.value(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace

// ---- Var / Tape ---------------------------------------------------------

Tape& Var::tape() const {
  if (tape_ == nullptr) throw std::logic_error("Var is not bound to a tape");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

const Tensor& Var::grad() const {
  const Tape& t = tape();
  if (!t.has_backward_run()) {
    throw std::logic_error("gradient requested before backward()");
  }
  return t.grad(id_);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs,
                 BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [this](std::size_t i) {
                                     return nodes_[i].requires_grad;
                                   });
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.size() != n.value.size()) {
    // Unreached node: materialize an exact zero gradient.
    auto& mutable_node = const_cast<Node&>(n);
    mutable_node.grad = Tensor(n.value.shape(), 0.0);
  }
  return n.grad;
}

void Tape::backward(const Var& root) {
  if (!root.valid() || &root.tape() != this) {
    throw std::logic_error("backward() needs a root recorded on this tape");
  }
  if (nodes_.empty()) throw std::logic_error("backward() on an empty tape");
  if (nodes_[root.id()].value.size() != 1) {
    throw std::invalid_argument("backward() root must be a scalar");
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad_buffer(root.id())[0] = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward) continue;
    if (n.grad.size() != n.value.size()) continue;  // not on a path from root
    n.backward(*this, i);
  }
  backward_done_ = true;
}

// ---- linear algebra -----------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "matmul: incompatible shapes " + shape_to_string(sa) + " x " +
              shape_to_string(sb));
  const kernels::MatmulDims dims{sa[0], sa[1], sb[1], false, false};
  Tensor out({dims.m, dims.n});
  kernels::matmul(a.value().data(), b.value().data(), out.data(), dims, false);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib},
                  [ia, ib, dims](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad(self);
                    if (tp.requires_grad(ia)) {
                      kernels::matmul(g.data(), tp.value(ib).data(),
                                      tp.grad_buffer(ia).data(),
                                      {dims.m, dims.n, dims.k, false, true},
                                      true);
                    }
                    if (tp.requires_grad(ib)) {
                      kernels::matmul(tp.value(ia).data(), g.data(),
                                      tp.grad_buffer(ib).data(),
                                      {dims.k, dims.m, dims.n, true, false},
                                      true);
                    }
                  });
}

Var bmm(const Var& a, const Var& b, bool trans_b) {
  Tape& t = same_tape(a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0],
          "bmm: expects two 3-D tensors with equal batch");
  const std::size_t batch = sa[0], m = sa[1], k = sa[2];
  const std::size_t n = trans_b ? sb[1] : sb[2];
  require((trans_b ? sb[2] : sb[1]) == k, "bmm: inner dimensions differ");
  Tensor out({batch, m, n});
  const auto av = a.value().data();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::matmul_serial(av.subspan(i * m * k, m * k),
                           bv.subspan(i * k * n, k * n),
                           out.data().subspan(i * m * n, m * n),
                           {m, k, n, false, trans_b}, false);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(
      std::move(out), {ia, ib},
      [=](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).data();
        const auto av = tp.value(ia).data();
        const auto bv = tp.value(ib).data();
        for (std::size_t i = 0; i < batch; ++i) {
          const auto gi = g.subspan(i * m * n, m * n);
          if (tp.requires_grad(ia)) {
            auto ga = tp.grad_buffer(ia).data().subspan(i * m * k, m * k);
            kernels::matmul_serial(gi, bv.subspan(i * k * n, k * n), ga,
                                   {m, n, k, false, !trans_b}, true);
          }
          if (tp.requires_grad(ib)) {
            auto gb = tp.grad_buffer(ib).data().subspan(i * k * n, k * n);
            if (trans_b) {
              kernels::matmul_serial(gi, av.subspan(i * m * k, m * k), gb,
                                     {n, m, k, true, false}, true);
            } else {
              kernels::matmul_serial(av.subspan(i * m * k, m * k), gi, gb,
                                     {k, m, n, true, false}, true);
            }
          }
        }
      });
}

// ---- elementwise binary -------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    for (std::size_t in : {ia, ib}) {
      if (!tp.requires_grad(in)) continue;
      auto& gi = tp.grad_buffer(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      const auto& bv = tp.value(ib);
      auto& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(ib)) {
      const auto& av = tp.value(ia);
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return elementwise(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var add_bias(const Var& a, const Var& bias) {
  Tape& t = same_tape(a, bias);
  const std::size_t width = last_dim(a.shape());
  require(bias.value().size() == width,
          "add_bias: bias length must equal the last dimension");
  Tensor out = a.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % width];
  const std::size_t ia = a.id(), ib = bias.id();
  return t.record(std::move(out), {ia, ib},
                  [ia, ib, width](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad(self);
                    if (tp.requires_grad(ia)) {
                      auto& ga = tp.grad_buffer(ia);
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    }
                    if (tp.requires_grad(ib)) {
                      auto& gb = tp.grad_buffer(ib);
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        gb[i % width] += g[i];
                      }
                    }
                  });
}

// ---- activations --------------------------------------------------------

Var sigmoid(const Var& a) {
  return elementwise(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return elementwise(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& a) {
  return elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
  return elementwise(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var softmax(const Var& a) {
  Tape& t = a.tape();
  const std::size_t width = last_dim(a.shape());
  Tensor out = a.value();
  for (std::size_t row = 0; row < out.size() / width; ++row) {
    double* r = out.data().data() + row * width;
    const double mx = *std::max_element(r, r + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      r[j] = std::exp(r[j] - mx);
      total += r[j];
    }
    for (std::size_t j = 0; j < width; ++j) r[j] /= total;
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, width](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& y = tp.value(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t row = 0; row < g.size() / width; ++row) {
      const std::size_t o = row * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += g[o + j] * y[o + j];
      for (std::size_t j = 0; j < width; ++j) {
        ga[o + j] += y[o + j] * (g[o + j] - dot);
      }
    }
  });
}

// ---- shape manipulation -------------------------------------------------

Var reshape(const Var& a, Shape shape) {
  Tape& t = a.tape();
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var transpose(const Var& a) {
  Tape& t = a.tape();
  require(a.shape().size() == 2, "transpose: expects a 2-D tensor");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  Tensor out({cols, rows});
  const auto& x = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia},
                  [ia, rows, cols](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad(self);
                    auto& ga = tp.grad_buffer(ia);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) {
                        ga[r * cols + c] += g[c * rows + r];
                      }
                    }
                  });
}

Var permute_0213(const Var& a) {
  Tape& t = a.tape();
  const auto& s = a.shape();
  require(s.size() == 4, "permute_0213: expects a 4-D tensor");
  const std::size_t d0 = s[0], d1 = s[1], d2 = s[2], d3 = s[3];
  Tensor out({d0, d2, d1, d3});
  const auto& x = a.value();
  auto src = [=](std::size_t i, std::size_t j, std::size_t k) {
    return ((i * d1 + j) * d2 + k) * d3;
  };
  auto dst = [=](std::size_t i, std::size_t j, std::size_t k) {
    return ((i * d2 + k) * d1 + j) * d3;
  };
  for (std::size_t i = 0; i < d0; ++i)
    for (std::size_t j = 0; j < d1; ++j)
      for (std::size_t k = 0; k < d2; ++k)
        for (std::size_t l = 0; l < d3; ++l) out[dst(i, j, k) + l] = x[src(i, j, k) + l];
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < d0; ++i)
      for (std::size_t j = 0; j < d1; ++j)
        for (std::size_t k = 0; k < d2; ++k)
          for (std::size_t l = 0; l < d3; ++l) ga[src(i, j, k) + l] += g[dst(i, j, k) + l];
  });
}

Var slice(const Var& a, std::size_t begin, std::size_t end) {
  Tape& t = a.tape();
  const std::size_t width = last_dim(a.shape());
  require(begin < end && end <= width, "slice: range out of bounds");
  const std::size_t rows = a.value().size() / width;
  const std::size_t w = end - begin;
  Shape shape = a.shape();
  shape.back() = w;
  Tensor out(shape);
  const auto& x = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data().begin() + r * width + begin, w,
                out.data().begin() + r * w);
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia},
                  [=](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad(self);
                    auto& ga = tp.grad_buffer(ia);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < w; ++j) {
                        ga[r * width + begin + j] += g[r * w + j];
                      }
                    }
                  });
}

Var concat(std::span<const Var> parts) {
  require(!parts.empty(), "concat: no inputs");
  Tape& t = parts.front().tape();
  Shape lead = parts.front().shape();
  lead.pop_back();
  const std::size_t rows = shape_numel(lead);
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(&p.tape() == &t, "concat: operands live on different tapes");
    Shape l = p.shape();
    const std::size_t w = l.back();
    l.pop_back();
    require(l == lead, "concat: leading dimensions differ");
    widths.push_back(w);
    ids.push_back(p.id());
    total += w;
  }
  Shape shape = lead;
  shape.push_back(total);
  Tensor out(shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& x = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(x.data().begin() + r * widths[p], widths[p],
                  out.data().begin() + r * total + offset);
    }
    offset += widths[p];
  }
  return t.record(std::move(out), ids,
                  [ids, widths, rows, total](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad(self);
                    std::size_t off = 0;
                    for (std::size_t p = 0; p < ids.size(); ++p) {
                      if (tp.requires_grad(ids[p])) {
                        auto& gp = tp.grad_buffer(ids[p]);
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t j = 0; j < widths[p]; ++j) {
                            gp[r * widths[p] + j] += g[r * total + off + j];
                          }
                        }
                      }
                      off += widths[p];
                    }
                  });
}

// ---- reductions and losses ----------------------------------------------

Var sum(const Var& a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return t.record(Tensor::scalar(s), {ia}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var reduce_mean(const Var& a) {
  require(!a.value().empty(), "reduce_mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var mean_axis1(const Var& a) {
  Tape& t = a.tape();
  const auto& s = a.shape();
  require(s.size() == 3 && s[1] > 0, "mean_axis1: expects a 3-D tensor");
  const std::size_t b = s[0], steps = s[1], d = s[2];
  Tensor out({b, d});
  const auto& x = a.value();
  const double inv = 1.0 / static_cast<double>(steps);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < steps; ++k)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += x[(i * steps + k) * d + j] * inv;
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < steps; ++k)
        for (std::size_t j = 0; j < d; ++j) ga[(i * steps + k) * d + j] += g[i * d + j] * inv;
  });
}

Var mse(const Var& pred, const Tensor& target) {
  Tape& t = pred.tape();
  require(pred.value().size() == target.size() && target.size() > 0,
          "mse: prediction and target sizes differ");
  const auto& p = pred.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - target[i];
    acc += d * d;
  }
  const double n = static_cast<double>(p.size());
  const std::size_t ip = pred.id();
  return t.record(Tensor::scalar(acc / n), {ip},
                  [ip, target, n](Tape& tp, std::size_t self) {
                    const double g = tp.grad(self)[0];
                    const auto& p = tp.value(ip);
                    auto& gp = tp.grad_buffer(ip);
                    for (std::size_t i = 0; i < p.size(); ++i) {
                      gp[i] += g * 2.0 * (p[i] - target[i]) / n;
                    }
                  });
}

Var squared_distance(const Var& a, const Tensor& anchor) {
  Tape& t = a.tape();
  require(a.value().size() == anchor.size(),
          "squared_distance: anchor size differs");
  const auto& x = a.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - anchor[i];
    acc += d * d;
  }
  const std::size_t ia = a.id();
  return t.record(Tensor::scalar(acc), {ia},
                  [ia, anchor](Tape& tp, std::size_t self) {
                    const double g = tp.grad(self)[0];
                    const auto& x = tp.value(ia);
                    auto& ga = tp.grad_buffer(ia);
                    for (std::size_t i = 0; i < x.size(); ++i) {
                      ga[i] += g * 2.0 * (x[i] - anchor[i]);
                    }
                  });
}

// ---- convolution ----------------------------------------------------------

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
  Tape& t = same_tape(x, weight);
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  require(sx.size() == 4 && sw.size() == 4, "conv2d: expects 4-D input and weight");
  require(sw[1] == sx[1], "conv2d: channel mismatch");
  require(sw[2] == sw[3] && sw[2] % 2 == 1, "conv2d: kernel must be odd and square");
  require(bias.value().size() == sw[0], "conv2d: bias length must equal cout");
  const std::size_t b = sx[0], cin = sx[1], h = sx[2], w = sx[3];
  const std::size_t cout = sw[0], ks = sw[2];
  const long pad = static_cast<long>(ks / 2);
  Tensor out({b, cout, h, w});
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();

  // Visits every (output pixel, input tap) pair inside the padded image.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ki = 0; ki < ks; ++ki)
            for (std::size_t kj = 0; kj < ks; ++kj) {
              const std::size_t widx = ((co * cin + ci) * ks + ki) * ks + kj;
              for (std::size_t i = 0; i < h; ++i) {
                const long si = static_cast<long>(i) + static_cast<long>(ki) - pad;
                if (si < 0 || si >= static_cast<long>(h)) continue;
                for (std::size_t j = 0; j < w; ++j) {
                  const long sj = static_cast<long>(j) + static_cast<long>(kj) - pad;
                  if (sj < 0 || sj >= static_cast<long>(w)) continue;
                  const std::size_t oidx = ((n * cout + co) * h + i) * w + j;
                  const std::size_t xidx =
                      ((n * cin + ci) * h + static_cast<std::size_t>(si)) * w +
                      static_cast<std::size_t>(sj);
                  fn(oidx, xidx, widx);
                }
              }
            }
  };

  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t p = 0; p < h * w; ++p) out[(n * cout + co) * h * w + p] = bv[co];
  for_each_tap([&](std::size_t o, std::size_t xi, std::size_t wi) {
    out[o] += wv[wi] * xv[xi];
  });

  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return t.record(std::move(out), {ix, iw, ib},
                  [=](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad(self);
                    const auto& xv = tp.value(ix);
                    const auto& wv = tp.value(iw);
                    if (tp.requires_grad(ix)) {
                      auto& gx = tp.grad_buffer(ix);
                      for_each_tap([&](std::size_t o, std::size_t xi, std::size_t wi) {
                        gx[xi] += g[o] * wv[wi];
                      });
                    }
                    if (tp.requires_grad(iw)) {
                      auto& gw = tp.grad_buffer(iw);
                      for_each_tap([&](std::size_t o, std::size_t xi, std::size_t wi) {
                        gw[wi] += g[o] * xv[xi];
                      });
                    }
                    if (tp.requires_grad(ib)) {
                      auto& gb = tp.grad_buffer(ib);
                      for (std::size_t n = 0; n < b; ++n)
                        for (std::size_t co = 0; co < cout; ++co)
                          for (std::size_t p = 0; p < h * w; ++p)
                            gb[co] += g[(n * cout + co) * h * w + p];
                    }
                  });
}

// ---- batch normalization --------------------------------------------------

Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
               const BatchNormOptions& opt) {
  Tape& t = same_tape(x, gamma);
  const auto& s = x.shape();
  require(opt.channel_axis < s.size(), "batch_norm: channel axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < opt.channel_axis; ++i) outer *= s[i];
  for (std::size_t i = opt.channel_axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t channels = s[opt.channel_axis];
  require(gamma.value().size() == channels && beta.value().size() == channels,
          "batch_norm: gamma/beta length must equal channel count");
  const std::size_t count = outer * inner;
  require(count > 0, "batch_norm: empty batch");
  auto index = [=](std::size_t o, std::size_t c, std::size_t i) {
    return (o * channels + c) * inner + i;
  };

  const auto& xv = x.value();
  std::vector<double> mean(channels, 0.0), var(channels, 0.0);
  if (opt.training) {
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) acc += xv[index(o, c, i)];
      mean[c] = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = xv[index(o, c, i)] - mean[c];
          sq += d * d;
        }
      var[c] = sq / static_cast<double>(count);
    }
    if (opt.running_mean != nullptr && opt.running_var != nullptr) {
      const double unbias =
          count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
      for (std::size_t c = 0; c < channels; ++c) {
        auto& rm = (*opt.running_mean)[c];
        auto& rv = (*opt.running_var)[c];
        rm = (1.0 - opt.momentum) * rm + opt.momentum * mean[c];
        rv = (1.0 - opt.momentum) * rv + opt.momentum * var[c] * unbias;
      }
    }
  } else {
    require(opt.running_mean != nullptr && opt.running_var != nullptr,
            "batch_norm: eval mode needs running statistics");
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = (*opt.running_mean)[c];
      var[c] = (*opt.running_var)[c];
    }
  }

  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + opt.eps);
  Tensor xhat(s);
  Tensor out(s);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = index(o, c, i);
        xhat[k] = (xv[k] - mean[c]) * inv_std[c];
        out[k] = gv[c] * xhat[k] + bv[c];
      }

  const bool training = opt.training;
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.record(
      std::move(out), {ix, ig, ib},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp,
                                                                std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& gv = tp.value(ig);
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t k = index(o, c, i);
              sum_g[c] += g[k];
              sum_gx[c] += g[k] * xhat[k];
            }
        if (tp.requires_grad(ig)) {
          auto& gg = tp.grad_buffer(ig);
          for (std::size_t c = 0; c < channels; ++c) gg[c] += sum_gx[c];
        }
        if (tp.requires_grad(ib)) {
          auto& gb = tp.grad_buffer(ib);
          for (std::size_t c = 0; c < channels; ++c) gb[c] += sum_g[c];
        }
        if (!tp.requires_grad(ix)) return;
        auto& gx = tp.grad_buffer(ix);
        const double m = static_cast<double>(count);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t k = index(o, c, i);
              if (training) {
                gx[k] += gv[c] * inv_std[c] *
                         (g[k] - sum_g[c] / m - xhat[k] * sum_gx[c] / m);
              } else {
                gx[k] += gv[c] * inv_std[c] * g[k];
              }
            }
      });
}

// ---- gradient check -------------------------------------------------------

GradCheckResult grad_check(const ScalarGraph& f, std::vector<Tensor> params,
                           double eps, double denom_floor) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  auto evaluate = [&](bool with_backward, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    Var out = f(tape, leaves);
    const double v = out.value()[0];
    if (!std::isfinite(v)) {
      throw std::domain_error("grad_check: non-finite function value");
    }
    if (with_backward) {
      tape.backward(out);
      for (const auto& l : leaves) grads->push_back(l.grad());
    }
    return v;
  };

  std::vector<Tensor> analytic;
  const double f0 = evaluate(true, &analytic);
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + eps;
      const double fp = evaluate(false, nullptr);
      params[p][i] = saved - eps;
      const double fm = evaluate(false, nullptr);
      params[p][i] = saved;

      const double forward = (fp - f0) / eps;
      const double backward = (f0 - fm) / eps;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[p][i];
      if (!std::isfinite(a)) {
        throw std::domain_error("grad_check: non-finite analytic gradient");
      }
      // A smooth function's one-sided slopes differ by O(eps * f''); a kink
      // produces an O(1) jump.
      const double jump = std::abs(forward - backward);
      if (jump > 1e-2 * std::max(1.0, std::abs(forward) + std::abs(backward))) {
        ++result.excluded;
        continue;
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace fedcast::ad
