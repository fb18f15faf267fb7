#include "ktraj/field.hpp"

#include <cmath>
#include <cstring>

#include "ktraj/checkpoint.hpp"
#include "ktraj/errors.hpp"

namespace ktraj {

namespace {

struct Layout {
  const double* w1;  // hidden x (D+1), row-major
  const double* b1;  // hidden
  const double* w2;  // D x hidden, row-major
  const double* b2;  // D
};

Layout unpack(const FieldParams& fp) {
  const double* p = fp.weights.data();
  Layout l;
  l.w1 = p;
  l.b1 = l.w1 + static_cast<std::size_t>(fp.hidden) * fp.input_dim();
  l.w2 = l.b1 + fp.hidden;
  l.b2 = l.w2 + static_cast<std::size_t>(fp.state_dim) * fp.hidden;
  return l;
}

void validate(const FieldParams& fp) {
  if (fp.state_dim < 1) throw argument_error("field: state_dim must be >= 1");
  if (fp.hidden < 1) throw argument_error("field: hidden must be >= 1");
  if (fp.weights.size() != fp.count())
    throw argument_error("field: packed weight vector has wrong length");
}

}  // namespace

FieldParams field_init(int state_dim, int hidden, bool include_time, Rng& rng) {
  if (state_dim < 1) throw argument_error("field_init: state_dim must be >= 1");
  if (hidden < 1) throw argument_error("field_init: hidden must be >= 1");
  FieldParams fp;
  fp.state_dim = state_dim;
  fp.hidden = hidden;
  fp.include_time = include_time;
  fp.weights.resize(fp.count());

  const double in_scale = 1.0 / std::sqrt(static_cast<double>(fp.input_dim()));
  const double out_scale = 1e-3 / std::sqrt(static_cast<double>(hidden));
  std::size_t i = 0;
  const std::size_t n1 = static_cast<std::size_t>(hidden) * fp.input_dim() + hidden;
  for (; i < n1; ++i) fp.weights[i] = rng.uniform(-in_scale, in_scale);
  for (; i < fp.weights.size(); ++i) fp.weights[i] = rng.uniform(-out_scale, out_scale);
  return fp;
}

void field_eval(const FieldParams& fp, const double* state, double t, double* out) {
  validate(fp);
  const Layout l = unpack(fp);
  const int D = fp.state_dim, H = fp.hidden, In = fp.input_dim();
  const double tin = fp.include_time ? t : 0.0;

  for (int d = 0; d < D; ++d) out[d] = l.b2[d];
  for (int h = 0; h < H; ++h) {
    const double* row = l.w1 + static_cast<std::size_t>(h) * In;
    double pre = l.b1[h];
    for (int d = 0; d < D; ++d) pre += row[d] * state[d];
    pre += row[D] * tin;
    const double z = std::tanh(pre);
    for (int d = 0; d < D; ++d) out[d] += l.w2[static_cast<std::size_t>(d) * H + h] * z;
  }
}

void field_vjp(const FieldParams& fp, const double* state, double t, const double* cot,
               double* cot_state, double* cot_params, double& cot_time) {
  validate(fp);
  const Layout l = unpack(fp);
  const int D = fp.state_dim, H = fp.hidden, In = fp.input_dim();
  const double tin = fp.include_time ? t : 0.0;

  // Offsets into the packed gradient, mirroring unpack().
  double* g_w1 = cot_params;
  double* g_b1 = g_w1 + static_cast<std::size_t>(H) * In;
  double* g_w2 = g_b1 + H;
  double* g_b2 = g_w2 + static_cast<std::size_t>(D) * H;

  for (int d = 0; d < D; ++d) cot_state[d] = 0.0;
  cot_time = 0.0;

  for (int h = 0; h < H; ++h) {
    const double* row = l.w1 + static_cast<std::size_t>(h) * In;
    double pre = l.b1[h];
    for (int d = 0; d < D; ++d) pre += row[d] * state[d];
    pre += row[D] * tin;
    const double z = std::tanh(pre);

    // cot_hid[h] = sum_d cot[d] w2[d,h]; dtanh = 1 - z^2
    double ch = 0.0;
    for (int d = 0; d < D; ++d) {
      const std::size_t w2i = static_cast<std::size_t>(d) * H + h;
      ch += cot[d] * l.w2[w2i];
      g_w2[w2i] = cot[d] * z;
    }
    const double cpre = ch * (1.0 - z * z);

    double* grow = g_w1 + static_cast<std::size_t>(h) * In;
    for (int d = 0; d < D; ++d) {
      cot_state[d] += row[d] * cpre;
      grow[d] = cpre * state[d];
    }
    grow[D] = cpre * tin;
    g_b1[h] = cpre;
    if (fp.include_time) cot_time += row[D] * cpre;
  }
  for (int d = 0; d < D; ++d) g_b2[d] = cot[d];
}

void save_field(const FieldParams& fp, const std::string& path) {
  validate(fp);
  Checkpoint ckpt;
  Tensor w;
  w.name = "field.weights";
  w.shape = {fp.weights.size()};
  w.data = fp.weights;
  ckpt.tensors.push_back(std::move(w));
  ckpt.meta.numbers["field.state_dim"] = fp.state_dim;
  ckpt.meta.numbers["field.hidden"] = fp.hidden;
  ckpt.meta.numbers["field.include_time"] = fp.include_time ? 1.0 : 0.0;
  save_checkpoint(ckpt, path);
}

FieldParams load_field(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  FieldParams fp;
  auto num = [&](const char* key) {
    auto it = ckpt.meta.numbers.find(key);
    if (it == ckpt.meta.numbers.end())
      throw io_error(std::string("field checkpoint: missing meta '") + key + "'");
    return it->second;
  };
  fp.state_dim = static_cast<int>(num("field.state_dim"));
  fp.hidden = static_cast<int>(num("field.hidden"));
  fp.include_time = num("field.include_time") != 0.0;
  fp.weights = ckpt.require("field.weights").data;
  validate(fp);
  return fp;
}

}  // namespace ktraj
