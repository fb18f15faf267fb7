#include "ktraj/diffcore.hpp"

#include <cmath>
#include <cstddef>
#include <sstream>

#include "ktraj/errors.hpp"

namespace ktraj::diff {

namespace {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw argument_error(op + ": " + what);
}

void require_rank(const std::string& op, const char* role, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    fail(op, std::string(role) + " must have rank " + std::to_string(rank) + ", got shape " +
                 shape_str(s));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

const Tape::Node& Tape::at(const TapeTensor& t, const char* who) const {
  if (t.id < 0 || static_cast<std::size_t>(t.id) >= nodes_.size()) {
    fail(who, "tensor id " + std::to_string(t.id) + " is not on this tape");
  }
  return nodes_[static_cast<std::size_t>(t.id)];
}

int Tape::push(Shape shape, std::vector<double> values, bool requires_grad,
               std::function<void(const std::vector<double>&)> back) {
  Node nd;
  nd.shape = std::move(shape);
  nd.values = std::move(values);
  nd.requires_grad = requires_grad;
  nd.back = std::move(back);
  nodes_.push_back(std::move(nd));
  return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buf(int id) {
  auto& g = grads_[static_cast<std::size_t>(id)];
  if (g.empty()) g.assign(numel(nodes_[static_cast<std::size_t>(id)].shape), 0.0);
  return g;
}

TapeTensor Tape::leaf(const Shape& shape, std::vector<double> values, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) fail("leaf", "non-positive dimension in shape " + shape_str(shape));
  }
  if (values.size() != numel(shape)) {
    fail("leaf", "values length " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  int id = push(shape, std::move(values), requires_grad, nullptr);
  return {id, nodes_.back().shape};
}

const std::vector<double>& Tape::values(const TapeTensor& t) const {
  return at(t, "values").values;
}

bool Tape::has_grad(const TapeTensor& t) const {
  at(t, "grad");
  return backward_done_ && !grads_[static_cast<std::size_t>(t.id)].empty();
}

const std::vector<double>& Tape::grad(const TapeTensor& t) const {
  at(t, "grad");
  if (!backward_done_) fail("grad", "backward has not run on this tape");
  const auto& g = grads_[static_cast<std::size_t>(t.id)];
  if (g.empty()) {
    fail("grad", "tensor " + std::to_string(t.id) +
                     " received no gradient (not differentiable or unused by the root)");
  }
  return g;
}

TapeTensor Tape::conv2d(const TapeTensor& x, const TapeTensor& kernel, const TapeTensor& bias) {
  const Node& nx = at(x, "conv2d");
  const Node& nk = at(kernel, "conv2d");
  const Node& nb = at(bias, "conv2d");
  require_rank("conv2d", "input", nx.shape, 3);
  require_rank("conv2d", "kernel", nk.shape, 4);
  require_rank("conv2d", "bias", nb.shape, 1);
  const int ci = nx.shape[0], h = nx.shape[1], w = nx.shape[2];
  const int co = nk.shape[0], kh = nk.shape[2], kw = nk.shape[3];
  if (nk.shape[1] != ci) {
    fail("conv2d", "kernel input channels " + std::to_string(nk.shape[1]) +
                       " do not match image channels " + std::to_string(ci));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    fail("conv2d", "kernel sides must be odd for same padding, got " + std::to_string(kh) + "x" +
                       std::to_string(kw));
  }
  if (nb.shape[0] != co) {
    fail("conv2d", "bias length " + std::to_string(nb.shape[0]) + " does not match " +
                       std::to_string(co) + " output channels");
  }
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);

  std::vector<double> out(static_cast<std::size_t>(co) * plane);
  const double* xv = nx.values.data();
  const double* kv = nk.values.data();
  const double* bv = nb.values.data();
  for (int oc = 0; oc < co; ++oc) {
    double* op = out.data() + static_cast<std::size_t>(oc) * plane;
    for (std::size_t i = 0; i < plane; ++i) op[i] = bv[oc];
    for (int icn = 0; icn < ci; ++icn) {
      const double* ip = xv + static_cast<std::size_t>(icn) * plane;
      const double* kp = kv + (static_cast<std::size_t>(oc) * ci + icn) * kh * kw;
      for (int dy = 0; dy < kh; ++dy) {
        const int sy = dy - ph;
        const int y0 = sy < 0 ? -sy : 0;
        const int y1 = sy > 0 ? h - sy : h;
        for (int dx = 0; dx < kw; ++dx) {
          const double kval = kp[dy * kw + dx];
          if (kval == 0.0) continue;
          const int sx = dx - pw;
          const int x0 = sx < 0 ? -sx : 0;
          const int x1 = sx > 0 ? w - sx : w;
          for (int y = y0; y < y1; ++y) {
            double* orow = op + static_cast<std::size_t>(y) * w;
            const double* irow = ip + static_cast<std::size_t>(y + sy) * w + sx;
            for (int xx = x0; xx < x1; ++xx) orow[xx] += kval * irow[xx];
          }
        }
      }
    }
  }

  const bool needs = nx.requires_grad || nk.requires_grad || nb.requires_grad;
  const int xi = x.id, ki = kernel.id, bi = bias.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, xi, ki, bi, ci, co, h, w, kh, kw, ph, pw, plane](const std::vector<double>& g) {
      const double* xv2 = nodes_[static_cast<std::size_t>(xi)].values.data();
      const double* kv2 = nodes_[static_cast<std::size_t>(ki)].values.data();
      if (wants_grad(bi)) {
        auto& gb = grad_buf(bi);
        for (int oc = 0; oc < co; ++oc) {
          const double* gp = g.data() + static_cast<std::size_t>(oc) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
          gb[static_cast<std::size_t>(oc)] += acc;
        }
      }
      if (wants_grad(ki)) {
        auto& gk = grad_buf(ki);
        for (int oc = 0; oc < co; ++oc) {
          const double* gp = g.data() + static_cast<std::size_t>(oc) * plane;
          for (int icn = 0; icn < ci; ++icn) {
            const double* ip = xv2 + static_cast<std::size_t>(icn) * plane;
            double* gkp = gk.data() + (static_cast<std::size_t>(oc) * ci + icn) * kh * kw;
            for (int dy = 0; dy < kh; ++dy) {
              const int sy = dy - ph;
              const int y0 = sy < 0 ? -sy : 0;
              const int y1 = sy > 0 ? h - sy : h;
              for (int dx = 0; dx < kw; ++dx) {
                const int sx = dx - pw;
                const int x0 = sx < 0 ? -sx : 0;
                const int x1 = sx > 0 ? w - sx : w;
                double acc = 0.0;
                for (int y = y0; y < y1; ++y) {
                  const double* grow = gp + static_cast<std::size_t>(y) * w;
                  const double* irow = ip + static_cast<std::size_t>(y + sy) * w + sx;
                  for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
                }
                gkp[dy * kw + dx] += acc;
              }
            }
          }
        }
      }
      if (wants_grad(xi)) {
        auto& gx = grad_buf(xi);
        for (int oc = 0; oc < co; ++oc) {
          const double* gp = g.data() + static_cast<std::size_t>(oc) * plane;
          for (int icn = 0; icn < ci; ++icn) {
            double* gxp = gx.data() + static_cast<std::size_t>(icn) * plane;
            const double* kp = kv2 + (static_cast<std::size_t>(oc) * ci + icn) * kh * kw;
            for (int dy = 0; dy < kh; ++dy) {
              const int sy = dy - ph;
              const int y0 = sy < 0 ? -sy : 0;
              const int y1 = sy > 0 ? h - sy : h;
              for (int dx = 0; dx < kw; ++dx) {
                const double kval = kp[dy * kw + dx];
                if (kval == 0.0) continue;
                const int sx = dx - pw;
                const int x0 = sx < 0 ? -sx : 0;
                const int x1 = sx > 0 ? w - sx : w;
                for (int y = y0; y < y1; ++y) {
                  const double* grow = gp + static_cast<std::size_t>(y) * w;
                  double* xrow = gxp + static_cast<std::size_t>(y + sy) * w + sx;
                  for (int xx = x0; xx < x1; ++xx) xrow[xx] += kval * grow[xx];
                }
              }
            }
          }
        }
      }
    };
  }
  int id = push({co, h, w}, std::move(out), needs, std::move(back));
  return {id, {co, h, w}};
}

TapeTensor Tape::leaky_relu(const TapeTensor& x, double slope) {
  const Node& nx = at(x, "leaky_relu");
  std::vector<double> out(nx.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = nx.values[i];
    out[i] = v >= 0.0 ? v : slope * v;
  }
  const bool needs = nx.requires_grad;
  const int xi = x.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, xi, slope](const std::vector<double>& g) {
      if (!wants_grad(xi)) return;
      auto& gx = grad_buf(xi);
      const auto& v = nodes_[static_cast<std::size_t>(xi)].values;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += v[i] >= 0.0 ? g[i] : slope * g[i];
    };
  }
  int id = push(nx.shape, std::move(out), needs, std::move(back));
  return {id, nodes_.back().shape};
}

TapeTensor Tape::instance_norm(const TapeTensor& x) {
  const Node& nx = at(x, "instance_norm");
  require_rank("instance_norm", "input", nx.shape, 3);
  const int c = nx.shape[0];
  const std::size_t plane =
      static_cast<std::size_t>(nx.shape[1]) * static_cast<std::size_t>(nx.shape[2]);
  const double eps = 1e-5;

  std::vector<double> out(nx.values.size());
  std::vector<double> inv_std(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const double* ip = nx.values.data() + static_cast<std::size_t>(ch) * plane;
    double* op = out.data() + static_cast<std::size_t>(ch) * plane;
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += ip[i];
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double d = ip[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(plane);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(ch)] = is;
    for (std::size_t i = 0; i < plane; ++i) op[i] = (ip[i] - mean) * is;
  }

  const bool needs = nx.requires_grad;
  const int xi = x.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    // dx = inv_std * (g - mean(g) - y * mean(g*y)), per channel, with y the
    // normalized output. Saves the output id to reuse y at backward time.
    const int yi = static_cast<int>(nodes_.size());
    back = [this, xi, yi, c, plane, inv_std](const std::vector<double>& g) {
      if (!wants_grad(xi)) return;
      auto& gx = grad_buf(xi);
      const auto& y = nodes_[static_cast<std::size_t>(yi)].values;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t base = static_cast<std::size_t>(ch) * plane;
        double gm = 0.0, gym = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          gm += g[base + i];
          gym += g[base + i] * y[base + i];
        }
        gm /= static_cast<double>(plane);
        gym /= static_cast<double>(plane);
        const double is = inv_std[static_cast<std::size_t>(ch)];
        for (std::size_t i = 0; i < plane; ++i) {
          gx[base + i] += is * (g[base + i] - gm - y[base + i] * gym);
        }
      }
    };
  }
  int id = push(nx.shape, std::move(out), needs, std::move(back));
  return {id, nodes_.back().shape};
}

TapeTensor Tape::max_pool2d(const TapeTensor& x) {
  const Node& nx = at(x, "max_pool2d");
  require_rank("max_pool2d", "input", nx.shape, 3);
  const int c = nx.shape[0], h = nx.shape[1], w = nx.shape[2];
  if (h % 2 != 0 || w % 2 != 0) {
    fail("max_pool2d", "spatial dims must be even, got " + std::to_string(h) + "x" +
                           std::to_string(w));
  }
  const int oh = h / 2, ow = w / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  const std::size_t oplane = static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow);

  std::vector<double> out(static_cast<std::size_t>(c) * oplane);
  // Winner's flat index inside the input; ties go to the lowest flat index,
  // enforced by the strict > comparison in scan order.
  std::vector<std::size_t> argmax(out.size());
  for (int ch = 0; ch < c; ++ch) {
    const double* ip = nx.values.data() + static_cast<std::size_t>(ch) * plane;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        std::size_t best = static_cast<std::size_t>(2 * oy) * w + static_cast<std::size_t>(2 * ox);
        double bv = ip[best];
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx =
                static_cast<std::size_t>(2 * oy + dy) * w + static_cast<std::size_t>(2 * ox + dx);
            if (ip[idx] > bv) {
              bv = ip[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = static_cast<std::size_t>(ch) * oplane +
                              static_cast<std::size_t>(oy) * ow + static_cast<std::size_t>(ox);
        out[o] = bv;
        argmax[o] = static_cast<std::size_t>(ch) * plane + best;
      }
    }
  }

  const bool needs = nx.requires_grad;
  const int xi = x.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, xi, argmax](const std::vector<double>& g) {
      if (!wants_grad(xi)) return;
      auto& gx = grad_buf(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
    };
  }
  int id = push({c, oh, ow}, std::move(out), needs, std::move(back));
  return {id, {c, oh, ow}};
}

TapeTensor Tape::nearest_upsample(const TapeTensor& x) {
  const Node& nx = at(x, "nearest_upsample");
  require_rank("nearest_upsample", "input", nx.shape, 3);
  const int c = nx.shape[0], h = nx.shape[1], w = nx.shape[2];
  const int oh = 2 * h, ow = 2 * w;
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  const std::size_t oplane = static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow);

  std::vector<double> out(static_cast<std::size_t>(c) * oplane);
  for (int ch = 0; ch < c; ++ch) {
    const double* ip = nx.values.data() + static_cast<std::size_t>(ch) * plane;
    double* op = out.data() + static_cast<std::size_t>(ch) * oplane;
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const double v = ip[static_cast<std::size_t>(y) * w + xx];
        const std::size_t o = static_cast<std::size_t>(2 * y) * ow + static_cast<std::size_t>(2 * xx);
        op[o] = v;
        op[o + 1] = v;
        op[o + ow] = v;
        op[o + ow + 1] = v;
      }
    }
  }

  const bool needs = nx.requires_grad;
  const int xi = x.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, xi, c, h, w, ow, plane, oplane](const std::vector<double>& g) {
      if (!wants_grad(xi)) return;
      auto& gx = grad_buf(xi);
      for (int ch = 0; ch < c; ++ch) {
        const double* gp = g.data() + static_cast<std::size_t>(ch) * oplane;
        double* xp = gx.data() + static_cast<std::size_t>(ch) * plane;
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) {
            const std::size_t o =
                static_cast<std::size_t>(2 * y) * ow + static_cast<std::size_t>(2 * xx);
            xp[static_cast<std::size_t>(y) * w + xx] += gp[o] + gp[o + 1] + gp[o + ow] + gp[o + ow + 1];
          }
        }
      }
    };
  }
  int id = push({c, oh, ow}, std::move(out), needs, std::move(back));
  return {id, {c, oh, ow}};
}

TapeTensor Tape::concat(const TapeTensor& a, const TapeTensor& b) {
  const Node& na = at(a, "concat");
  const Node& nb = at(b, "concat");
  require_rank("concat", "first input", na.shape, 3);
  require_rank("concat", "second input", nb.shape, 3);
  if (na.shape[1] != nb.shape[1] || na.shape[2] != nb.shape[2]) {
    fail("concat", "spatial dims differ: " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  }
  const int c = na.shape[0] + nb.shape[0];
  std::vector<double> out;
  out.reserve(na.values.size() + nb.values.size());
  out.insert(out.end(), na.values.begin(), na.values.end());
  out.insert(out.end(), nb.values.begin(), nb.values.end());

  const bool needs = na.requires_grad || nb.requires_grad;
  const int ai = a.id, bi = b.id;
  const std::size_t asz = na.values.size();
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, ai, bi, asz](const std::vector<double>& g) {
      if (wants_grad(ai)) {
        auto& ga = grad_buf(ai);
        for (std::size_t i = 0; i < asz; ++i) ga[i] += g[i];
      }
      if (wants_grad(bi)) {
        auto& gb = grad_buf(bi);
        for (std::size_t i = asz; i < g.size(); ++i) gb[i - asz] += g[i];
      }
    };
  }
  Shape os{c, na.shape[1], na.shape[2]};
  int id = push(os, std::move(out), needs, std::move(back));
  return {id, os};
}

TapeTensor Tape::add(const TapeTensor& a, const TapeTensor& b) {
  const Node& na = at(a, "add");
  const Node& nb = at(b, "add");
  if (na.shape != nb.shape) {
    fail("add", "shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  }
  std::vector<double> out(na.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.values[i] + nb.values[i];

  const bool needs = na.requires_grad || nb.requires_grad;
  const int ai = a.id, bi = b.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, ai, bi](const std::vector<double>& g) {
      if (wants_grad(ai)) {
        auto& ga = grad_buf(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants_grad(bi)) {
        auto& gb = grad_buf(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  }
  int id = push(na.shape, std::move(out), needs, std::move(back));
  return {id, nodes_.back().shape};
}

TapeTensor Tape::mul(const TapeTensor& a, const TapeTensor& b) {
  const Node& na = at(a, "mul");
  const Node& nb = at(b, "mul");
  if (na.shape != nb.shape) {
    fail("mul", "shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  }
  std::vector<double> out(na.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.values[i] * nb.values[i];

  const bool needs = na.requires_grad || nb.requires_grad;
  const int ai = a.id, bi = b.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, ai, bi](const std::vector<double>& g) {
      const auto& av = nodes_[static_cast<std::size_t>(ai)].values;
      const auto& bv = nodes_[static_cast<std::size_t>(bi)].values;
      if (wants_grad(ai)) {
        auto& ga = grad_buf(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (wants_grad(bi)) {
        auto& gb = grad_buf(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    };
  }
  int id = push(na.shape, std::move(out), needs, std::move(back));
  return {id, nodes_.back().shape};
}

TapeTensor Tape::mul_scalar(const TapeTensor& x, double s) {
  const Node& nx = at(x, "mul_scalar");
  std::vector<double> out(nx.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * nx.values[i];

  const bool needs = nx.requires_grad;
  const int xi = x.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, xi, s](const std::vector<double>& g) {
      if (!wants_grad(xi)) return;
      auto& gx = grad_buf(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
    };
  }
  int id = push(nx.shape, std::move(out), needs, std::move(back));
  return {id, nodes_.back().shape};
}

TapeTensor Tape::linear(const TapeTensor& x, const TapeTensor& weight, const TapeTensor& bias) {
  const Node& nx = at(x, "linear");
  const Node& nw = at(weight, "linear");
  const Node& nb = at(bias, "linear");
  require_rank("linear", "input", nx.shape, 1);
  require_rank("linear", "weight", nw.shape, 2);
  require_rank("linear", "bias", nb.shape, 1);
  const int n = nx.shape[0], m = nw.shape[0];
  if (nw.shape[1] != n) {
    fail("linear", "weight columns " + std::to_string(nw.shape[1]) + " do not match input length " +
                       std::to_string(n));
  }
  if (nb.shape[0] != m) {
    fail("linear", "bias length " + std::to_string(nb.shape[0]) + " does not match " +
                       std::to_string(m) + " rows");
  }
  std::vector<double> out(static_cast<std::size_t>(m));
  for (int r = 0; r < m; ++r) {
    const double* wr = nw.values.data() + static_cast<std::size_t>(r) * n;
    double acc = nb.values[static_cast<std::size_t>(r)];
    for (int cidx = 0; cidx < n; ++cidx) acc += wr[cidx] * nx.values[static_cast<std::size_t>(cidx)];
    out[static_cast<std::size_t>(r)] = acc;
  }

  const bool needs = nx.requires_grad || nw.requires_grad || nb.requires_grad;
  const int xi = x.id, wi = weight.id, bi = bias.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, xi, wi, bi, n, m](const std::vector<double>& g) {
      const auto& xv = nodes_[static_cast<std::size_t>(xi)].values;
      const auto& wv = nodes_[static_cast<std::size_t>(wi)].values;
      if (wants_grad(bi)) {
        auto& gb = grad_buf(bi);
        for (int r = 0; r < m; ++r) gb[static_cast<std::size_t>(r)] += g[static_cast<std::size_t>(r)];
      }
      if (wants_grad(wi)) {
        auto& gw = grad_buf(wi);
        for (int r = 0; r < m; ++r) {
          double* gwr = gw.data() + static_cast<std::size_t>(r) * n;
          const double gr = g[static_cast<std::size_t>(r)];
          for (int cidx = 0; cidx < n; ++cidx) gwr[cidx] += gr * xv[static_cast<std::size_t>(cidx)];
        }
      }
      if (wants_grad(xi)) {
        auto& gx = grad_buf(xi);
        for (int r = 0; r < m; ++r) {
          const double* wr = wv.data() + static_cast<std::size_t>(r) * n;
          const double gr = g[static_cast<std::size_t>(r)];
          for (int cidx = 0; cidx < n; ++cidx) gx[static_cast<std::size_t>(cidx)] += gr * wr[cidx];
        }
      }
    };
  }
  Shape os{m};
  int id = push(os, std::move(out), needs, std::move(back));
  return {id, os};
}

TapeTensor Tape::sum(const TapeTensor& x) {
  const Node& nx = at(x, "sum");
  double acc = 0.0;
  for (double v : nx.values) acc += v;

  const bool needs = nx.requires_grad;
  const int xi = x.id;
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    back = [this, xi](const std::vector<double>& g) {
      if (!wants_grad(xi)) return;
      auto& gx = grad_buf(xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    };
  }
  int id = push({1}, {acc}, needs, std::move(back));
  return {id, {1}};
}

TapeTensor Tape::custom(const std::string& name, const std::vector<TapeTensor>& parents,
                        const Shape& out_shape, std::vector<double> out_values,
                        CustomBackward cb) {
  bool needs = false;
  std::vector<int> pids;
  pids.reserve(parents.size());
  for (const TapeTensor& p : parents) {
    const Node& np = at(p, name.c_str());
    needs = needs || np.requires_grad;
    pids.push_back(p.id);
  }
  for (int d : out_shape) {
    if (d <= 0) fail(name, "non-positive dimension in shape " + shape_str(out_shape));
  }
  if (out_values.size() != numel(out_shape)) {
    fail(name, "values length " + std::to_string(out_values.size()) + " does not match shape " +
                   shape_str(out_shape));
  }
  std::function<void(const std::vector<double>&)> back;
  if (needs) {
    if (!cb) fail(name, "differentiable custom node needs a backward function");
    back = [this, pids, cb](const std::vector<double>& g) {
      std::vector<const std::vector<double>*> pv(pids.size());
      std::vector<std::vector<double>*> pg(pids.size(), nullptr);
      for (std::size_t i = 0; i < pids.size(); ++i) {
        pv[i] = &nodes_[static_cast<std::size_t>(pids[i])].values;
        if (wants_grad(pids[i])) pg[i] = &grad_buf(pids[i]);
      }
      cb(g, pv, pg);
    };
  }
  int id = push(out_shape, std::move(out_values), needs, std::move(back));
  return {id, out_shape};
}

void Tape::backward(const TapeTensor& root) {
  const Node& nr = at(root, "backward");
  if (backward_done_) fail("backward", "tape has already been differentiated");
  if (numel(nr.shape) != 1) {
    fail("backward", "root must be scalar, got shape " + shape_str(nr.shape));
  }
  if (!nr.requires_grad) {
    fail("backward", "root does not depend on any differentiable leaf");
  }
  grads_.assign(nodes_.size(), {});
  grads_[static_cast<std::size_t>(root.id)].assign(1, 1.0);
  backward_done_ = true;  // set first so grad_buf is usable inside closures
  for (int i = root.id; i >= 0; --i) {
    const Node& nd = nodes_[static_cast<std::size_t>(i)];
    if (!nd.requires_grad || !nd.back) continue;
    const auto& g = grads_[static_cast<std::size_t>(i)];
    if (g.empty()) continue;  // not on any path from the root
    nd.back(g);
  }
}

}  // namespace ktraj::diff
