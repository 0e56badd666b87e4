#include "ontraffic/net.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>

#include "kernels.hpp"
#include "ontraffic/config_json.hpp"

namespace ontraffic::net {

using ad::Tape;
using ad::Tensor;
using ad::Var;

std::string to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  throw std::invalid_argument("unknown activation '" + s + "' (expected tanh or relu)");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("model config '") + name + "': must be >= 1");
  };
  positive(d_enc, "d_enc");
  positive(heads, "heads");
  positive(head_width, "head_width");
  positive(p, "p");
  const std::pair<const char*, const std::vector<std::size_t>*> hidden[] = {
      {"coord_hidden", &coord_hidden},   {"value_enc_hidden", &value_enc_hidden},
      {"score_hidden", &score_hidden},   {"head_value_hidden", &head_value_hidden},
      {"phi_hidden", &phi_hidden},       {"phi_sigma_hidden", &phi_sigma_hidden},
      {"trunk_hidden", &trunk_hidden},   {"nd_hidden", &nd_hidden},
      {"nd_sigma_hidden", &nd_sigma_hidden}, {"fd_hidden", &fd_hidden}};
  for (const auto& [name, widths] : hidden)
    for (auto w : *widths) positive(w, name);
  if (!(sigma_floor > 0.0)) throw std::invalid_argument("model config 'sigma_floor': must be > 0");
  if (!(x_max > x_min)) throw std::invalid_argument("model config 'x_max': must exceed x_min");
  if (!(t_max > t_min)) throw std::invalid_argument("model config 't_max': must exceed t_min");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.d_enc = 8;
  c.heads = 2;
  c.head_width = 8;
  c.p = 8;
  for (auto* h : {&c.coord_hidden, &c.value_enc_hidden, &c.score_hidden, &c.head_value_hidden, &c.phi_hidden,
                  &c.phi_sigma_hidden, &c.trunk_hidden, &c.nd_hidden, &c.nd_sigma_hidden, &c.fd_hidden})
    *h = {8};
  return c;
}

// ---- parameters -------------------------------------------------------------

namespace {

Mlp make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, bool last_bias, Rng& rng) {
  Mlp m;
  std::size_t prev = in;
  for (std::size_t i = 0; i <= hidden.size(); ++i) {
    const bool last = i == hidden.size();
    const std::size_t next = last ? out : hidden[i];
    const double limit = std::sqrt(6.0 / static_cast<double>(prev + next));
    std::vector<double> w(prev * next);
    for (auto& x : w) x = uniform(rng, -limit, limit);
    Dense d{Tensor::matrix(prev, next, std::move(w), true), std::nullopt};
    if (!last || last_bias) d.b = Tensor::matrix(1, next, std::vector<double>(next, 0.0), true);
    m.layers.push_back(std::move(d));
    prev = next;
  }
  return m;
}

// Fixed traversal shared by named(), binding and checkpoints.
template <class P, class F>
void for_each_mlp(P& p, F&& f) {
  f(std::string("coord_enc"), p.coord_enc);
  f(std::string("value_enc"), p.value_enc);
  for (std::size_t l = 0; l < p.score.size(); ++l) f("score." + std::to_string(l), p.score[l]);
  for (std::size_t l = 0; l < p.head_value.size(); ++l) f("head_value." + std::to_string(l), p.head_value[l]);
  f(std::string("phi"), p.phi);
  f(std::string("phi_sigma"), p.phi_sigma);
  f(std::string("trunk"), p.trunk);
  f(std::string("trunk_sigma"), p.trunk_sigma);
  f(std::string("nd"), p.nd);
  f(std::string("nd_sigma"), p.nd_sigma);
  f(std::string("fd"), p.fd);
}

// Indices into the traversal above.
struct Slots {
  std::size_t heads;
  std::size_t coord_enc() const { return 0; }
  std::size_t value_enc() const { return 1; }
  std::size_t score(std::size_t l) const { return 2 + l; }
  std::size_t head_value(std::size_t l) const { return 2 + heads + l; }
  std::size_t phi() const { return 2 + 2 * heads; }
  std::size_t phi_sigma() const { return phi() + 1; }
  std::size_t trunk() const { return phi() + 2; }
  std::size_t trunk_sigma() const { return phi() + 3; }
  std::size_t nd() const { return phi() + 4; }
  std::size_t nd_sigma() const { return phi() + 5; }
  std::size_t fd() const { return phi() + 6; }
};

template <class P, class T>
std::vector<std::pair<std::string, T*>> collect(P& p) {
  std::vector<std::pair<std::string, T*>> out;
  for_each_mlp(p, [&](const std::string& name, auto& m) {
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      out.emplace_back(name + "." + std::to_string(i) + ".w", &m.layers[i].w);
      if (m.layers[i].b) out.emplace_back(name + "." + std::to_string(i) + ".b", &*m.layers[i].b);
    }
  });
  return out;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p;
  p.config = cfg;
  p.coord_enc = make_mlp(3, cfg.coord_hidden, cfg.d_enc, true, rng);
  p.value_enc = make_mlp(2, cfg.value_enc_hidden, cfg.d_enc, true, rng);
  for (std::size_t l = 0; l < cfg.heads; ++l) p.score.push_back(make_mlp(cfg.d_enc, cfg.score_hidden, 1, false, rng));
  for (std::size_t l = 0; l < cfg.heads; ++l)
    p.head_value.push_back(make_mlp(cfg.d_enc, cfg.head_value_hidden, cfg.head_width, true, rng));
  const std::size_t pooled = cfg.heads * cfg.head_width;
  p.phi = make_mlp(pooled, cfg.phi_hidden, cfg.p, true, rng);
  p.phi_sigma = make_mlp(pooled, cfg.phi_sigma_hidden, cfg.p, true, rng);
  if (cfg.shared_trunk) {
    p.trunk = make_mlp(2, cfg.trunk_hidden, 2 * cfg.p, true, rng);
  } else {
    p.trunk = make_mlp(2, cfg.trunk_hidden, cfg.p, true, rng);
    p.trunk_sigma = make_mlp(2, cfg.trunk_hidden, cfg.p, true, rng);
  }
  if (!cfg.linear_decoder) {
    p.nd = make_mlp(cfg.p, cfg.nd_hidden, 1, true, rng);
    p.nd_sigma = make_mlp(cfg.p, cfg.nd_sigma_hidden, 1, true, rng);
  }
  p.fd = make_mlp(1, cfg.fd_hidden, 1, true, rng);
  return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() { return collect<ModelParams, Tensor>(*this); }

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
  return collect<const ModelParams, const Tensor>(*this);
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

// ---- features ---------------------------------------------------------------

std::vector<std::size_t> canonical_order(const InputSet& input) {
  std::vector<std::size_t> idx(input.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (input.coords[a] != input.coords[b]) return input.coords[a] < input.coords[b];
    return input.values[a] < input.values[b];
  });
  return idx;
}

CanonicalRows canonical_rows(const InputSet& input) {
  CanonicalRows out;
  for (std::size_t i : canonical_order(input)) {
    if (!out.index.empty()) {
      const std::size_t last = out.index.back();
      if (input.coords[last] == input.coords[i] && input.values[last] == input.values[i]) {
        out.count.back() += 1.0;
        continue;
      }
    }
    out.index.push_back(i);
    out.count.push_back(1.0);
  }
  return out;
}

std::array<double, 3> coord_features(const ModelConfig& c, const std::array<double, 3>& coords) {
  return {2.0 * (coords[0] - c.x_min) / (c.x_max - c.x_min) - 1.0,
          2.0 * (coords[1] - c.t_min) / (c.t_max - c.t_min) - 1.0, coords[2] == pipeline::kControlId ? -1.0 : 1.0};
}

std::array<double, 2> query_features(const ModelConfig& c, const Query& q) {
  return {2.0 * (q.x - c.x_min) / (c.x_max - c.x_min) - 1.0, 2.0 * (q.t - c.t_min) / (c.t_max - c.t_min) - 1.0};
}

// ---- bound model ------------------------------------------------------------

BoundModel::BoundModel(Tape& tape, const ModelParams& params) : tape_(tape), params_(params) {
  for_each_mlp(params, [&](const std::string&, const Mlp& m) {
    BoundMlp bm;
    for (const auto& layer : m.layers) {
      BoundDense d{tape_.input(layer.w), std::nullopt};
      order_.push_back(d.w);
      if (layer.b) {
        d.b = tape_.input(*layer.b);
        order_.push_back(*d.b);
      }
      bm.push_back(d);
    }
    mlps_.push_back(std::move(bm));
  });
}

Var BoundModel::apply(const BoundMlp& m, Var x) const {
  for (std::size_t i = 0; i < m.size(); ++i) {
    x = ad::matmul(x, m[i].w);
    if (m[i].b) x = ad::add(x, *m[i].b);
    if (i + 1 < m.size()) x = params_.config.activation == Activation::kTanh ? ad::tanh(x) : ad::relu(x);
  }
  return x;
}

Var BoundModel::encode(const InputSet& input) {
  std::vector<std::size_t> rows(input.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return encode(input, rows);
}

Var BoundModel::encode(const InputSet& input, std::span<const std::size_t> rows) {
  const std::size_t m = rows.size();
  if (m == 0) throw std::invalid_argument("encode: input set is empty");
  std::vector<double> c(3 * m), v(2 * m);
  for (std::size_t r = 0; r < m; ++r) {
    const auto f = coord_features(params_.config, input.coords[rows[r]]);
    std::copy(f.begin(), f.end(), c.begin() + static_cast<std::ptrdiff_t>(3 * r));
    v[2 * r] = input.values[rows[r]][0];
    v[2 * r + 1] = input.values[rows[r]][1];
  }
  const Slots s{params_.config.heads};
  Var pc = apply(mlp(s.coord_enc()), tape_.constant(m, 3, std::move(c)));
  Var pv = apply(mlp(s.value_enc()), tape_.constant(m, 2, std::move(v)));
  return ad::add(pc, pv);
}

std::vector<Var> BoundModel::attention_weights(Var psi, std::span<const double> counts) {
  if (psi.rows() == 0) throw std::invalid_argument("attention: no observations");
  if (!counts.empty() && counts.size() != psi.rows()) throw std::invalid_argument("attention: counts do not match rows");
  const bool weighted = std::any_of(counts.begin(), counts.end(), [](double c) { return c != 1.0; });
  const Slots s{params_.config.heads};
  const double inv = 1.0 / std::sqrt(static_cast<double>(params_.config.d_enc));
  std::vector<Var> w;
  for (std::size_t l = 0; l < params_.config.heads; ++l) {
    Var wl = ad::softmax(ad::scale(apply(mlp(s.score(l)), psi), inv), 0);
    if (weighted) {
      wl = ad::mul(wl, tape_.constant(counts.size(), 1, {counts.begin(), counts.end()}));
      wl = ad::div(wl, ad::sum(wl, 0));
    }
    w.push_back(wl);
  }
  return w;
}

Var BoundModel::attention_pool(Var psi, std::span<const double> counts) {
  const Slots s{params_.config.heads};
  const auto w = attention_weights(psi, counts);
  std::vector<Var> heads;
  for (std::size_t l = 0; l < params_.config.heads; ++l) {
    Var values = apply(mlp(s.head_value(l)), psi);
    heads.push_back(ad::matmul(ad::transpose(w[l]), values));
  }
  return heads.size() == 1 ? heads[0] : ad::concat(heads, 1);
}

std::pair<Var, Var> BoundModel::branch(const InputSet& input) {
  const Slots s{params_.config.heads};
  const auto rows = canonical_rows(input);
  Var nu = attention_pool(encode(input, rows.index), rows.count);
  return {apply(mlp(s.phi()), nu), apply(mlp(s.phi_sigma()), nu)};
}

std::pair<Var, Var> BoundModel::trunk(std::span<const Query> queries) {
  if (queries.empty()) throw std::invalid_argument("trunk: no queries");
  const std::size_t n = queries.size();
  std::vector<double> q(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = query_features(params_.config, queries[i]);
    q[2 * i] = f[0];
    q[2 * i + 1] = f[1];
  }
  const Slots s{params_.config.heads};
  Var qv = tape_.constant(n, 2, std::move(q));
  if (params_.config.shared_trunk) {
    Var both = apply(mlp(s.trunk()), qv);
    const std::size_t p = params_.config.p;
    return {ad::slice_cols(both, 0, p), ad::slice_cols(both, p, 2 * p)};
  }
  return {apply(mlp(s.trunk()), qv), apply(mlp(s.trunk_sigma()), qv)};
}

std::pair<Var, Var> BoundModel::decode(Var beta, Var tau, Var beta_sigma, Var tau_sigma) {
  const Slots s{params_.config.heads};
  Var prod = ad::mul(tau, beta);
  Var prod_sigma = ad::mul(tau_sigma, beta_sigma);
  Var rho, raw;
  if (params_.config.linear_decoder) {
    rho = ad::sum(prod, 1);
    raw = ad::sum(prod_sigma, 1);
  } else {
    rho = apply(mlp(s.nd()), prod);
    raw = apply(mlp(s.nd_sigma()), prod_sigma);
  }
  return {rho, ad::add_scalar(ad::softplus(raw), params_.config.sigma_floor)};
}

std::pair<Var, Var> BoundModel::fd_velocity(Var rho) {
  const Slots s{params_.config.heads};
  const BoundMlp& m = mlp(s.fd());
  const std::size_t n = rho.rows();
  Var h = rho;
  Var d = tape_.constant(n, 1, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < m.size(); ++i) {
    Var z = ad::matmul(h, m[i].w);
    if (m[i].b) z = ad::add(z, *m[i].b);
    d = ad::matmul(d, m[i].w);
    if (i + 1 == m.size()) {
      h = z;
      break;
    }
    if (params_.config.activation == Activation::kTanh) {
      h = ad::tanh(z);
      d = ad::mul(d, ad::add_scalar(ad::scale(ad::square(h), -1.0), 1.0));
    } else {
      h = ad::relu(z);
      const auto zv = z.value();
      std::vector<double> mask(zv.size());
      for (std::size_t k = 0; k < zv.size(); ++k) mask[k] = zv[k] > 0.0 ? 1.0 : 0.0;
      d = ad::mul(d, tape_.constant(z.rows(), z.cols(), std::move(mask)));
    }
  }
  return {h, d};
}

Var BoundModel::propagate_uncertainty(Var sigma_rho, Var dfd) { return ad::mul(ad::abs(dfd), sigma_rho); }

BoundModel::Outputs BoundModel::forward(const InputSet& input, std::span<const Query> queries) {
  auto [beta, beta_sigma] = branch(input);
  auto [tau, tau_sigma] = trunk(queries);
  auto [rho, sigma_rho] = decode(beta, tau, beta_sigma, tau_sigma);
  auto [v, dfd] = fd_velocity(rho);
  return {rho, v, sigma_rho, propagate_uncertainty(sigma_rho, dfd)};
}

std::vector<std::vector<double>> BoundModel::gradients() const {
  std::vector<std::vector<double>> g;
  g.reserve(order_.size());
  for (const Var& v : order_) g.push_back(tape_.grad(v));
  return g;
}

// ---- inference --------------------------------------------------------------

namespace {

std::vector<double> copy_values(Var v) { return {v.value().begin(), v.value().end()}; }

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowF = Eigen::Matrix<float, 1, Eigen::Dynamic>;

// Row-broadcast updates; Eigen's rowwise() on row-major storage does not
// vectorise.
template <class M, class R>
void add_rows(M& m, const R& row) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r) += row;
}

template <class M, class R>
void mul_rows(M& m, const R& row) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).array() *= row.array();
}

Eigen::Map<const MatD> view(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

MatD run_double(const Mlp& m, MatD x, Activation a) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const Dense& d = m.layers[i];
    MatD z = x * view(d.w);
    if (d.b) add_rows(z, view(*d.b).row(0));
    if (i + 1 < m.layers.size()) {
      if (a == Activation::kTanh) {
        ad::tanh_inplace(std::span<double>(z.data(), static_cast<std::size_t>(z.size())));
      } else {
        z = z.cwiseMax(0.0);
      }
    }
    x = std::move(z);
  }
  return x;
}

struct LayerF {
  MatF w;
  RowF b;
  bool has_bias = false;
};

std::vector<LayerF> to_float(const Mlp& m) {
  std::vector<LayerF> out;
  for (const auto& d : m.layers) {
    LayerF l;
    l.w = view(d.w).cast<float>();
    if (d.b) {
      l.has_bias = true;
      l.b = view(*d.b).row(0).cast<float>();
    }
    out.push_back(std::move(l));
  }
  return out;
}

void activate(MatF& x, Activation a) {
  if (a == Activation::kTanh) {
    ad::tanh_inplace(std::span<float>(x.data(), static_cast<std::size_t>(x.size())));
  } else {
    x = x.cwiseMax(0.0f);
  }
}

// out = act(x W + b); `out` keeps its allocation across chunks.
void product(const MatF& x, const MatF& w, MatF& out) {
  out.resize(x.rows(), w.cols());
  kernels::dense_f32(x.data(), static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(x.cols()), w.data(),
                     static_cast<std::size_t>(w.cols()), nullptr, out.data(), false);
}

void dense(const LayerF& l, const MatF& x, MatF& out, bool act, Activation a) {
  out.resize(x.rows(), l.w.cols());
  kernels::dense_f32(x.data(), static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(x.cols()), l.w.data(),
                     static_cast<std::size_t>(l.w.cols()), l.has_bias ? l.b.data() : nullptr, out.data(),
                     act && a == Activation::kTanh);
  if (act && a == Activation::kRelu) out = out.cwiseMax(0.0f);
}

// Runs an MLP through two ping-pong buffers; returns the buffer holding the
// output.
MatF& run_float(const std::vector<LayerF>& layers, const MatF& x, MatF& a, MatF& b, Activation act) {
  const MatF* in = &x;
  MatF* out = &a;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    dense(layers[i], *in, *out, i + 1 < layers.size(), act);
    in = out;
    out = out == &a ? &b : &a;
  }
  return *const_cast<MatF*>(in);
}

float softplus_f(float x) { return std::max(x, 0.0f) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

std::pair<std::vector<double>, std::vector<double>> branch_forward(const ModelParams& params, const InputSet& input) {
  const ModelConfig& c = params.config;
  const auto rows = canonical_rows(input);
  const auto m = static_cast<Eigen::Index>(rows.index.size());
  if (m == 0) throw std::invalid_argument("branch: input set is empty");
  MatD coords(m, 3), values(m, 2);
  for (Eigen::Index r = 0; r < m; ++r) {
    const std::size_t i = rows.index[static_cast<std::size_t>(r)];
    const auto f = coord_features(c, input.coords[i]);
    coords.row(r) << f[0], f[1], f[2];
    values.row(r) << input.values[i][0], input.values[i][1];
  }
  const MatD psi = run_double(params.coord_enc, coords, c.activation) + run_double(params.value_enc, values, c.activation);

  const double inv = 1.0 / std::sqrt(static_cast<double>(c.d_enc));
  const auto hw = static_cast<Eigen::Index>(c.head_width);
  MatD nu(1, static_cast<Eigen::Index>(c.heads) * hw);
  for (std::size_t l = 0; l < c.heads; ++l) {
    const MatD score = run_double(params.score[l], psi, c.activation);
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < m; ++r) mx = std::max(mx, score(r, 0) * inv);
    MatD w(1, m);
    double total = 0.0;
    for (Eigen::Index r = 0; r < m; ++r) {
      w(0, r) = rows.count[static_cast<std::size_t>(r)] * std::exp(score(r, 0) * inv - mx);
      total += w(0, r);
    }
    w /= total;
    nu.middleCols(static_cast<Eigen::Index>(l) * hw, hw) = w * run_double(params.head_value[l], psi, c.activation);
  }
  const MatD beta = run_double(params.phi, nu, c.activation);
  const MatD beta_sigma = run_double(params.phi_sigma, nu, c.activation);
  return {{beta.data(), beta.data() + beta.size()}, {beta_sigma.data(), beta_sigma.data() + beta_sigma.size()}};
}

PredictionField predict_reference(const ModelParams& params, const InputSet& input, std::span<const Query> queries) {
  Tape tape;
  BoundModel m(tape, params);
  const auto out = m.forward(input, queries);
  return {copy_values(out.rho), copy_values(out.v), copy_values(out.sigma_rho), copy_values(out.sigma_v)};
}

PredictionField predict(const ModelParams& params, const InputSet& input, std::span<const Query> queries) {
  if (queries.empty()) throw std::invalid_argument("predict: no queries");
  const ModelConfig& c = params.config;
  const auto [beta_d, beta_sigma_d] = branch_forward(params, input);
  const RowF beta = Eigen::Map<const Eigen::RowVectorXd>(beta_d.data(), static_cast<Eigen::Index>(c.p)).cast<float>();
  const RowF beta_sigma =
      Eigen::Map<const Eigen::RowVectorXd>(beta_sigma_d.data(), static_cast<Eigen::Index>(c.p)).cast<float>();

  const auto trunk = to_float(params.trunk);
  const auto trunk_sigma = to_float(params.trunk_sigma);
  const auto nd = to_float(params.nd);
  const auto nd_sigma = to_float(params.nd_sigma);
  const auto fd = to_float(params.fd);

  const std::size_t n = queries.size();
  PredictionField out;
  out.rho.resize(n);
  out.v.resize(n);
  out.sigma_rho.resize(n);
  out.sigma_v.resize(n);

  constexpr std::size_t kChunk = 512;
  const auto p = static_cast<Eigen::Index>(c.p);
  MatF q, buf_a, buf_b, tau, tau_sigma, h, d, dz;
  Eigen::VectorXf rho, raw;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t len = std::min(kChunk, n - start);
    const auto rows = static_cast<Eigen::Index>(len);
    q.resize(rows, 2);
    for (std::size_t i = 0; i < len; ++i) {
      const auto f = query_features(c, queries[start + i]);
      q(static_cast<Eigen::Index>(i), 0) = static_cast<float>(f[0]);
      q(static_cast<Eigen::Index>(i), 1) = static_cast<float>(f[1]);
    }
    if (c.shared_trunk) {
      const MatF& both = run_float(trunk, q, buf_a, buf_b, c.activation);
      tau = both.leftCols(p);
      tau_sigma = both.rightCols(p);
    } else {
      tau = run_float(trunk, q, buf_a, buf_b, c.activation);
      tau_sigma = run_float(trunk_sigma, q, buf_a, buf_b, c.activation);
    }
    mul_rows(tau, beta);
    mul_rows(tau_sigma, beta_sigma);
    if (c.linear_decoder) {
      rho = tau.rowwise().sum();
      raw = tau_sigma.rowwise().sum();
    } else {
      rho = run_float(nd, tau, buf_a, buf_b, c.activation).col(0);
      raw = run_float(nd_sigma, tau_sigma, buf_a, buf_b, c.activation).col(0);
    }

    // FD and its derivative, layer by layer.
    h = rho;
    d.setOnes(rows, 1);
    for (std::size_t i = 0; i < fd.size(); ++i) {
      const bool last = i + 1 == fd.size();
      dense(fd[i], h, buf_a, false, c.activation);
      product(d, fd[i].w, dz);
      if (!last) {
        if (c.activation == Activation::kTanh) {
          activate(buf_a, c.activation);
          dz.array() *= 1.0f - buf_a.array().square();
        } else {
          dz.array() *= (buf_a.array() > 0.0f).cast<float>();
          buf_a = buf_a.cwiseMax(0.0f);
        }
      }
      h.swap(buf_a);
      d.swap(dz);
    }

    const float floor = static_cast<float>(c.sigma_floor);
    for (std::size_t i = 0; i < len; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const float s = softplus_f(raw(r)) + floor;
      out.rho[start + i] = rho(r);
      out.v[start + i] = h(r, 0);
      out.sigma_rho[start + i] = s;
      out.sigma_v[start + i] = std::abs(d(r, 0)) * s;
    }
  }
  return out;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'O', 'N', 'T', 'C'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const double> values) {
  for (double x : values) {
    const float f = static_cast<float>(x);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(out, u);
  }
}

Json describe(const std::string& name, const Tensor& t, std::size_t& offset) {
  Json j{{"name", name}, {"shape", t.shape()}, {"offset", offset}};
  offset += t.size();
  return j;
}

}  // namespace

void round_to_stored_precision(ModelParams& params) {
  for (auto& [name, t] : params.named())
    for (auto& x : t->mutable_data()) x = static_cast<double>(static_cast<float>(x));
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Json tensors = Json::array(), extra = Json::array();
  std::size_t offset = 0;
  const auto named = ckpt.params.named();
  for (const auto& [name, t] : named) tensors.push_back(describe(name, *t, offset));
  for (const auto& [name, t] : ckpt.extra) extra.push_back(describe(name, t, offset));
  Json meta;
  try {
    meta = Json::parse(ckpt.meta_json);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: metadata is not valid JSON: ") + e.what());
  }
  const Json header{{"config", to_json(ckpt.params.config)},
                    {"tensors", tensors},
                    {"extra", extra},
                    {"meta", meta},
                    {"values", offset}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + 4 * offset);
  for (const auto& [name, t] : named) put_floats(out, t->data());
  for (const auto& [name, t] : ckpt.extra) put_floats(out, t.data());
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("checkpoint: not a checkpoint file (bad magic)");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::size_t header_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + header_len) throw CheckpointError("checkpoint: truncated header");
  Json header;
  try {
    header = Json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::size_t data_at = 12 + header_len;
  try {
    const std::size_t values = header.at("values").get<std::size_t>();
    if (bytes.size() != data_at + 4 * values)
      throw CheckpointError("checkpoint: data section holds " + std::to_string(bytes.size() - data_at) +
                            " bytes, expected " + std::to_string(4 * values));
    auto read_tensor = [&](const Json& d) {
      const auto shape = d.at("shape").get<ad::Shape>();
      const auto offset = d.at("offset").get<std::size_t>();
      std::size_t n = 1;
      for (auto s : shape) n *= s;
      if (offset + n > values) throw CheckpointError("checkpoint: tensor '" + d.at("name").get<std::string>() + "' out of range");
      std::vector<double> data(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t u = get_u32(bytes, data_at + 4 * (offset + i));
        float f;
        std::memcpy(&f, &u, 4);
        data[i] = f;
      }
      return Tensor(shape, std::move(data));
    };

    ModelConfig cfg;
    apply_json(cfg, header.at("config"));
    Rng rng(0);
    Checkpoint ckpt{ModelParams::init(cfg, rng), header.at("meta").dump(), {}};
    auto named = ckpt.params.named();
    const Json& tensors = header.at("tensors");
    if (tensors.size() != named.size())
      throw CheckpointError("checkpoint: " + std::to_string(tensors.size()) + " tensors stored, model needs " +
                            std::to_string(named.size()));
    for (std::size_t i = 0; i < named.size(); ++i) {
      const auto name = tensors[i].at("name").get<std::string>();
      if (name != named[i].first) throw CheckpointError("checkpoint: expected tensor '" + named[i].first + "', found '" + name + "'");
      Tensor t = read_tensor(tensors[i]);
      if (t.shape() != named[i].second->shape())
        throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + ad::shape_string(t.shape()) +
                              ", model expects " + ad::shape_string(named[i].second->shape()));
      *named[i].second = Tensor(t.shape(), {t.data().begin(), t.data().end()}, true);
    }
    for (const auto& d : header.at("extra")) ckpt.extra.emplace_back(d.at("name").get<std::string>(), read_tensor(d));
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ontraffic::net
