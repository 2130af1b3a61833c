#include "medfuse/embedding.hpp"

#include <cmath>

namespace medfuse {

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::kMuFuse:
      return "mufuse";
    case FusionKind::kAdditive:
      return "additive";
    case FusionKind::kConcat:
      return "concat";
    case FusionKind::kScane:
      return "scane";
  }
  return "?";
}

FusionKind parse_fusion_kind(const std::string& text) {
  if (text == "mufuse") return FusionKind::kMuFuse;
  if (text == "additive") return FusionKind::kAdditive;
  if (text == "concat") return FusionKind::kConcat;
  if (text == "scane") return FusionKind::kScane;
  throw ConfigError("unknown fusion kind '" + text + "' (expected mufuse|additive|concat|scane)");
}

void FusionConfig::validate() const {
  if (d <= 0 || d_prime <= 0 || k <= 0) throw ConfigError("fusion: d, d_prime and k must be positive");
  if (projector_hidden <= 0 || d_c <= 0) throw ConfigError("fusion: projector_hidden and d_c must be positive");
  switch (kind) {
    case FusionKind::kMuFuse:
      if (d != d_prime * k) {
        throw ConfigError("fusion: mufuse requires d = d_prime * k (d=" + std::to_string(d) +
                          ", d_prime=" + std::to_string(d_prime) + ", k=" + std::to_string(k) + ")");
      }
      break;
    case FusionKind::kScane:
      if (d_prime != 1 || k != d) throw ConfigError("fusion: scane requires d_prime = 1 and k = d");
      break;
    case FusionKind::kAdditive:
      if (d_prime != d || k != 1) throw ConfigError("fusion: additive requires d_prime = d (k = 1)");
      break;
    case FusionKind::kConcat:
      break;
  }
}

FusionConfig FusionConfig::normalized() const {
  FusionConfig out = *this;
  if (out.kind == FusionKind::kMuFuse && out.d_prime == 1) out.kind = FusionKind::kScane;
  if (out.kind == FusionKind::kScane) {
    out.d_prime = 1;
    out.k = out.d;
  }
  if (out.kind == FusionKind::kAdditive) {
    out.d_prime = out.d;
    out.k = 1;
  }
  if (out.kind == FusionKind::kConcat) out.k = 1;
  return out;
}

FusionConfig FusionConfig::from_config(const KeyValueConfig& cfg) {
  FusionConfig f;
  f.kind = parse_fusion_kind(cfg.get_string("fusion.kind", "mufuse"));
  f.d = static_cast<int>(cfg.get_int("fusion.d", f.d));
  f.projector_hidden = static_cast<int>(cfg.get_int("fusion.projector_hidden", f.projector_hidden));
  f.d_c = static_cast<int>(cfg.get_int("fusion.d_c", f.d_c));
  const bool has_k = cfg.has("fusion.k");
  const bool has_dp = cfg.has("fusion.d_prime");
  switch (f.kind) {
    case FusionKind::kMuFuse:
      if (has_k) {
        f.k = static_cast<int>(cfg.get_int("fusion.k"));
        if (f.k <= 0 || f.d % f.k != 0) {
          throw ConfigError(cfg.origin() + ": fusion.k=" + std::to_string(f.k) +
                            " does not divide d=" + std::to_string(f.d));
        }
        f.d_prime = has_dp ? static_cast<int>(cfg.get_int("fusion.d_prime")) : f.d / f.k;
      } else if (has_dp) {
        f.d_prime = static_cast<int>(cfg.get_int("fusion.d_prime"));
        if (f.d_prime <= 0 || f.d % f.d_prime != 0) {
          throw ConfigError(cfg.origin() + ": fusion.d_prime does not divide d");
        }
        f.k = f.d / f.d_prime;
      } else {
        f.k = f.d % 4 == 0 ? 4 : 1;
        f.d_prime = f.d / f.k;
      }
      break;
    case FusionKind::kScane:
      f.d_prime = 1;
      f.k = f.d;
      break;
    case FusionKind::kAdditive:
      f.d_prime = f.d;
      f.k = 1;
      break;
    case FusionKind::kConcat:
      f.d_prime = static_cast<int>(cfg.get_int("fusion.d_prime", f.d));
      f.k = 1;
      break;
  }
  f.validate();
  return f;
}

std::string to_string(TimeMode mode) { return mode == TimeMode::kAdd ? "add" : "multiply"; }

TimeMode parse_time_mode(const std::string& text) {
  if (text == "add") return TimeMode::kAdd;
  if (text == "multiply") return TimeMode::kMultiply;
  throw ConfigError("unknown time mode '" + text + "' (expected add|multiply)");
}

TimeConfig TimeConfig::from_config(const KeyValueConfig& cfg) {
  TimeConfig t;
  t.mode = parse_time_mode(cfg.get_string("time.mode", "add"));
  t.omega_min = cfg.get_double("time.omega_min", t.omega_min);
  t.omega_max = cfg.get_double("time.omega_max", t.omega_max);
  if (!(t.omega_min > 0.0) || !(t.omega_max >= t.omega_min)) {
    throw ConfigError(cfg.origin() + ": need 0 < time.omega_min <= time.omega_max");
  }
  return t;
}

std::vector<double> time_wavelengths(int d, double omega_min, double omega_max) {
  if (d <= 0 || d % 2 != 0) throw ConfigError("time encoding width must be positive and even");
  const int n = d / 2;
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double frac = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
    w[i] = omega_min * std::pow(omega_max / omega_min, frac);
  }
  return w;
}

template <class T>
Vector<T> time_encoding(double t, int d, const std::vector<double>& wavelengths) {
  if (d % 2 != 0) throw ConfigError("time encoding width must be even");
  if (!(t >= 0.0)) throw ContractError("time encoding requires t >= 0");
  if (static_cast<int>(wavelengths.size()) != d / 2) throw ShapeError("time encoding: wavelength count");
  Vector<T> p(d);
  for (int i = 0; i < d / 2; ++i) {
    p(2 * i) = static_cast<T>(std::sin(t / wavelengths[i]));
    p(2 * i + 1) = static_cast<T>(std::cos(t / wavelengths[i]));
  }
  return p;
}

template <class T>
Vector<T> inject_time(const Vector<T>& content, const Vector<T>& p_t, TimeMode mode) {
  if (content.size() != p_t.size()) throw ShapeError("inject_time: width mismatch");
  if (mode == TimeMode::kAdd) return content + p_t;
  Matrix<T> g = Tape<T>::sigmoid_of(p_t.transpose());
  return content.cwiseProduct(g.row(0).transpose());
}

namespace {

template <class T>
Matrix<T> uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, std::uint64_t seed,
                         const std::string& name) {
  Rng rng = make_stream(seed, "init." + name);
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

template <class T>
Vector<T> row_vec(const Matrix<T>& m, Eigen::Index r) {
  return m.row(r).transpose();
}

}  // namespace

template <class T>
void init_embedding_params(ParamStore<T>& store, const FusionConfig& cfg, int n_features,
                           int total_categories, std::uint64_t seed) {
  cfg.validate();
  const int d = cfg.d, dp = cfg.d_prime, h = cfg.projector_hidden;
  auto add_uniform = [&](const char* name, Eigen::Index r, Eigen::Index c, double bound) {
    store.add(name, uniform_matrix<T>(r, c, bound, seed, name));
  };
  add_uniform(names::kFeatureTable, n_features, d, 1.0 / std::sqrt(static_cast<double>(d)));
  add_uniform(names::kProjW1, h, 1, 1.0);
  add_uniform(names::kProjB1, 1, h, 1.0);
  add_uniform(names::kProjW2, dp, h, 1.0 / std::sqrt(static_cast<double>(h)));
  add_uniform(names::kProjB2, 1, dp, 1.0 / std::sqrt(static_cast<double>(h)));
  store.add(names::kGamma, Matrix<T>::Ones(n_features, dp));
  store.add(names::kBeta, Matrix<T>::Zero(n_features, dp));
  add_uniform(names::kCatTable, std::max(total_categories, 1), cfg.d_c,
              1.0 / std::sqrt(static_cast<double>(cfg.d_c)));
  add_uniform(names::kWCat, d, d + cfg.d_c, 1.0 / std::sqrt(static_cast<double>(d + cfg.d_c)));
  add_uniform(names::kConcatProj, d, d + dp, 1.0 / std::sqrt(static_cast<double>(d + dp)));
}

template <class T>
Vector<T> embed_feature(int f, const ParamStore<T>& params) {
  const auto& table = params.at(names::kFeatureTable).value;
  if (f < 0 || f >= table.rows()) throw IndexError("embed_feature: feature " + std::to_string(f) + " out of range");
  return row_vec<T>(table, f);
}

template <class T>
Vector<T> project_value(double v, const ParamStore<T>& params) {
  if (!std::isfinite(v)) throw ContractError("embed_value: non-finite value");
  const auto& w1 = params.at(names::kProjW1).value;
  const auto& b1 = params.at(names::kProjB1).value;
  const auto& w2 = params.at(names::kProjW2).value;
  const auto& b2 = params.at(names::kProjB2).value;
  Vector<T> hidden = (w1.col(0) * static_cast<T>(v) + b1.row(0).transpose()).array().tanh().matrix();
  return w2 * hidden + b2.row(0).transpose();
}

template <class T>
Vector<T> embed_value(double v, int f, const ParamStore<T>& params) {
  const auto& gamma = params.at(names::kGamma).value;
  const auto& beta = params.at(names::kBeta).value;
  if (f < 0 || f >= gamma.rows()) throw IndexError("embed_value: feature out of range");
  Vector<T> z = project_value<T>(v, params);
  return gamma.row(f).transpose().cwiseProduct(z) + beta.row(f).transpose();
}

template <class T>
Vector<T> fuse_mufuse(const Vector<T>& e_f, const Vector<T>& e_v, const FusionConfig& cfg) {
  if (cfg.d != cfg.d_prime * cfg.k || e_f.size() != cfg.d || e_v.size() != cfg.d_prime) {
    throw ShapeError("fuse_mufuse: expected e_f in R^d and e_v in R^d' with d = d' k");
  }
  Matrix<T> gates = Tape<T>::sigmoid_of(e_v.transpose());
  Vector<T> out(cfg.d);
  for (int j = 0; j < cfg.d_prime; ++j) {
    out.segment(j * cfg.k, cfg.k) = gates(0, j) * e_f.segment(j * cfg.k, cfg.k);
  }
  return out;
}

template <class T>
Vector<T> fuse_mufuse_broadcast(const Vector<T>& e_f, const Vector<T>& e_v, const FusionConfig& cfg) {
  if (cfg.d != cfg.d_prime * cfg.k || e_f.size() != cfg.d || e_v.size() != cfg.d_prime) {
    throw ShapeError("fuse_mufuse: expected e_f in R^d and e_v in R^d' with d = d' k");
  }
  Matrix<T> gates = Tape<T>::sigmoid_of(e_v.transpose());
  Vector<T> repeated(cfg.d);
  for (int i = 0; i < cfg.d; ++i) repeated(i) = gates(0, i / cfg.k);
  return repeated.cwiseProduct(e_f);
}

template <class T>
Vector<T> fuse_additive(const Vector<T>& e_f, const Vector<T>& e_v) {
  if (e_f.size() != e_v.size()) throw ShapeError("fuse_additive: width mismatch");
  return e_f + e_v;
}

template <class T>
Vector<T> fuse_concat(const Vector<T>& e_f, const Vector<T>& e_v, const ParamStore<T>& params) {
  const auto& proj = params.at(names::kConcatProj).value;
  if (proj.cols() != e_f.size() + e_v.size()) throw ShapeError("fuse_concat: projection width mismatch");
  Vector<T> joined(e_f.size() + e_v.size());
  joined << e_f, e_v;
  return proj * joined;
}

template <class T>
Vector<T> embed_categorical(int f, int c, const ParamStore<T>& params,
                            const std::vector<int>& category_offsets,
                            const std::vector<int>& category_counts) {
  if (f < 0 || f >= static_cast<int>(category_offsets.size()) || category_offsets[f] < 0) {
    throw IndexError("embed_categorical: feature " + std::to_string(f) + " is not categorical");
  }
  if (c < 0 || c >= category_counts[f]) {
    throw IndexError("embed_categorical: class " + std::to_string(c) + " out of vocabulary");
  }
  const auto& w = params.at(names::kWCat).value;
  Vector<T> e_f = embed_feature<T>(f, params);
  Vector<T> e_c = row_vec<T>(params.at(names::kCatTable).value, category_offsets[f] + c);
  Vector<T> joined(e_f.size() + e_c.size());
  joined << e_f, e_c;
  return w * joined;
}

template <class T>
Vector<T> hadamard_product(const Vector<T>& e_f, const Vector<T>& g) {
  return e_f.cwiseProduct(g);
}

template <class T>
Vector<T> hadamard_reparam(const Vector<T>& e_f, const Vector<T>& g) {
  Vector<T> shifted = g - Vector<T>::Ones(g.size());
  return e_f + e_f.cwiseProduct(shifted);
}

template <class T>
Vector<T> fuse_value_token(int f, double v, const ParamStore<T>& params, const FusionConfig& cfg) {
  Vector<T> e_f = embed_feature<T>(f, params);
  Vector<T> e_v = embed_value<T>(v, f, params);
  switch (cfg.kind) {
    case FusionKind::kMuFuse:
    case FusionKind::kScane:
      return fuse_mufuse<T>(e_f, e_v, cfg);
    case FusionKind::kAdditive:
      return fuse_additive<T>(e_f, e_v);
    case FusionKind::kConcat:
      return fuse_concat<T>(e_f, e_v, params);
  }
  throw ConfigError("unknown fusion kind");
}

template <class T>
typename Tape<T>::Var fuse_rows_tape(ParamBinder<T>& params, const FusionConfig& cfg,
                                     typename Tape<T>::Var e_f, typename Tape<T>::Var e_v) {
  Tape<T>& tape = params.tape();
  switch (cfg.kind) {
    case FusionKind::kMuFuse:
    case FusionKind::kScane:
      if (tape.cols(e_v) * cfg.k != tape.cols(e_f)) throw ShapeError("fuse_mufuse: d != d' k");
      return tape.hadamard(e_f, tape.repeat_cols(tape.sigmoid(e_v), cfg.k));
    case FusionKind::kAdditive:
      return tape.add(e_f, e_v);
    case FusionKind::kConcat:
      return tape.linear(tape.concat_cols(e_f, e_v), params(names::kConcatProj));
  }
  throw ConfigError("unknown fusion kind");
}

template <class T>
typename Tape<T>::Var fuse_numeric_tape(ParamBinder<T>& params, const FusionConfig& cfg,
                                        const NumericBatch<T>& batch) {
  Tape<T>& tape = params.tape();
  const auto n = static_cast<Eigen::Index>(batch.values.size());
  Matrix<T> v(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) v(i, 0) = batch.values[i];
  auto hidden = tape.tanh(tape.linear(tape.constant(std::move(v)), params(names::kProjW1),
                                      params(names::kProjB1)));
  auto z = tape.linear(hidden, params(names::kProjW2), params(names::kProjB2));
  auto gamma = tape.gather_rows(params(names::kGamma), batch.features);
  auto beta = tape.gather_rows(params(names::kBeta), batch.features);
  auto e_v = tape.add(tape.hadamard(gamma, z), beta);
  auto e_f = tape.gather_rows(params(names::kFeatureTable), batch.features);
  return fuse_rows_tape<T>(params, cfg, e_f, e_v);
}

template <class T>
typename Tape<T>::Var embed_categorical_tape(ParamBinder<T>& params, const std::vector<int>& features,
                                             const std::vector<int>& rows) {
  Tape<T>& tape = params.tape();
  auto e_f = tape.gather_rows(params(names::kFeatureTable), features);
  auto e_c = tape.gather_rows(params(names::kCatTable), rows);
  return tape.linear(tape.concat_cols(e_f, e_c), params(names::kWCat));
}

#define MEDFUSE_INSTANTIATE(T)                                                                    \
  template Vector<T> time_encoding<T>(double, int, const std::vector<double>&);                   \
  template Vector<T> inject_time<T>(const Vector<T>&, const Vector<T>&, TimeMode);                \
  template void init_embedding_params<T>(ParamStore<T>&, const FusionConfig&, int, int,           \
                                         std::uint64_t);                                          \
  template Vector<T> embed_feature<T>(int, const ParamStore<T>&);                                 \
  template Vector<T> project_value<T>(double, const ParamStore<T>&);                              \
  template Vector<T> embed_value<T>(double, int, const ParamStore<T>&);                           \
  template Vector<T> fuse_mufuse<T>(const Vector<T>&, const Vector<T>&, const FusionConfig&);     \
  template Vector<T> fuse_mufuse_broadcast<T>(const Vector<T>&, const Vector<T>&,                 \
                                              const FusionConfig&);                               \
  template Vector<T> fuse_additive<T>(const Vector<T>&, const Vector<T>&);                        \
  template Vector<T> fuse_concat<T>(const Vector<T>&, const Vector<T>&, const ParamStore<T>&);    \
  template Vector<T> embed_categorical<T>(int, int, const ParamStore<T>&, const std::vector<int>&, \
                                          const std::vector<int>&);                               \
  template Vector<T> hadamard_product<T>(const Vector<T>&, const Vector<T>&);                     \
  template Vector<T> hadamard_reparam<T>(const Vector<T>&, const Vector<T>&);                     \
  template Vector<T> fuse_value_token<T>(int, double, const ParamStore<T>&, const FusionConfig&); \
  template Tape<T>::Var fuse_rows_tape<T>(ParamBinder<T>&, const FusionConfig&, Tape<T>::Var,     \
                                          Tape<T>::Var);                                          \
  template Tape<T>::Var fuse_numeric_tape<T>(ParamBinder<T>&, const FusionConfig&,                \
                                             const NumericBatch<T>&);                             \
  template Tape<T>::Var embed_categorical_tape<T>(ParamBinder<T>&, const std::vector<int>&,       \
                                                  const std::vector<int>&);

MEDFUSE_INSTANTIATE(float)
MEDFUSE_INSTANTIATE(double)

#undef MEDFUSE_INSTANTIATE

}  // namespace medfuse
