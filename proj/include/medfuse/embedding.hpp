#pragma once

#include "medfuse/autodiff.hpp"
#include "medfuse/common.hpp"
#include "medfuse/config.hpp"

#include <string>
#include <vector>

namespace medfuse {

enum class FusionKind { kMuFuse, kAdditive, kConcat, kScane };

std::string to_string(FusionKind kind);
FusionKind parse_fusion_kind(const std::string& text);

struct FusionConfig {
  FusionKind kind = FusionKind::kMuFuse;
  int d = 144;
  int d_prime = 36;
  int k = 4;
  int projector_hidden = 16;
  int d_c = 8;

  // Throws ConfigError unless the dimensions satisfy the kind's constraints
  // (mufuse: d = d' k; scane: d' = 1, k = d; additive: d' = d).
  void validate() const;

  // Canonical form: MuFuse with a single gate (d' = 1) is the scane kind.
  FusionConfig normalized() const;

  bool operator==(const FusionConfig&) const = default;

  // Builds from "fusion.*" keys. For mufuse/scane, d' follows from k when
  // only k is given (and vice versa).
  static FusionConfig from_config(const KeyValueConfig& cfg);
};

enum class TimeMode { kAdd, kMultiply };

std::string to_string(TimeMode mode);
TimeMode parse_time_mode(const std::string& text);

struct TimeConfig {
  TimeMode mode = TimeMode::kAdd;
  double omega_min = 1.0;
  double omega_max = 10000.0;

  static TimeConfig from_config(const KeyValueConfig& cfg);
};

// Geometric wavelengths omega_0 = omega_min ... omega_{d/2-1} = omega_max.
std::vector<double> time_wavelengths(int d, double omega_min, double omega_max);

// Sinusoidal time vector: p[2i] = sin(t / omega_i), p[2i+1] = cos(t / omega_i).
template <class T>
Vector<T> time_encoding(double t, int d, const std::vector<double>& wavelengths);

// Content/time combination: add (default) or sigmoid-gated product.
template <class T>
Vector<T> inject_time(const Vector<T>& content, const Vector<T>& p_t, TimeMode mode);

// Parameter tensors of the embedding layer, keyed by name in a ParamStore:
//   feature_table   F x d        identity embeddings e_f
//   projector.w1    h x 1        shared value projector, tanh hidden layer
//   projector.b1    1 x h
//   projector.w2    d' x h       linear output layer
//   projector.b2    1 x d'
//   gamma, beta     F x d'       feature-conditioned affine of the value
//   cat_table       (sum C_f) x d_c  class embeddings, one block per feature
//   w_cat           d x (d + d_c)
//   concat_proj     d x (d + d')  used only by the concat kind
namespace names {
inline constexpr const char* kFeatureTable = "feature_table";
inline constexpr const char* kProjW1 = "projector.w1";
inline constexpr const char* kProjB1 = "projector.b1";
inline constexpr const char* kProjW2 = "projector.w2";
inline constexpr const char* kProjB2 = "projector.b2";
inline constexpr const char* kGamma = "gamma";
inline constexpr const char* kBeta = "beta";
inline constexpr const char* kCatTable = "cat_table";
inline constexpr const char* kWCat = "w_cat";
inline constexpr const char* kConcatProj = "concat_proj";
}  // namespace names

// Allocates and initializes the embedding tensors. Each tensor draws from
// its own named RNG stream, so tensors of equal shape are identical across
// configurations that share a seed.
template <class T>
void init_embedding_params(ParamStore<T>& store, const FusionConfig& cfg, int n_features,
                           int total_categories, std::uint64_t seed);

// ---- single-token reference operations --------------------------------------

template <class T>
Vector<T> embed_feature(int f, const ParamStore<T>& params);

template <class T>
Vector<T> project_value(double v, const ParamStore<T>& params);  // phi(v)

template <class T>
Vector<T> embed_value(double v, int f, const ParamStore<T>& params);  // gamma_f * phi(v) + beta_f

// Block-gate form: e_f split into d' contiguous blocks of size k, block j
// scaled by sigmoid(e_v[j]).
template <class T>
Vector<T> fuse_mufuse(const Vector<T>& e_f, const Vector<T>& e_v, const FusionConfig& cfg);

// Broadcast form: repeat each gate k times, then Hadamard product with e_f.
template <class T>
Vector<T> fuse_mufuse_broadcast(const Vector<T>& e_f, const Vector<T>& e_v, const FusionConfig& cfg);

template <class T>
Vector<T> fuse_additive(const Vector<T>& e_f, const Vector<T>& e_v);

template <class T>
Vector<T> fuse_concat(const Vector<T>& e_f, const Vector<T>& e_v, const ParamStore<T>& params);

template <class T>
Vector<T> embed_categorical(int f, int c, const ParamStore<T>& params,
                            const std::vector<int>& category_offsets,
                            const std::vector<int>& category_counts);

// Plain Hadamard product and its reparameterized form e_f + e_f * (g - 1).
template <class T>
Vector<T> hadamard_product(const Vector<T>& e_f, const Vector<T>& g);
template <class T>
Vector<T> hadamard_reparam(const Vector<T>& e_f, const Vector<T>& g);

// Fused token content for one numeric token under any fusion kind.
template <class T>
Vector<T> fuse_value_token(int f, double v, const ParamStore<T>& params, const FusionConfig& cfg);

// ---- tape versions used by the model ---------------------------------------

template <class T>
struct NumericBatch {
  std::vector<int> features;
  std::vector<T> values;
};

// Row-wise fusion of identity rows e_f (n x d) with value rows e_v (n x d').
template <class T>
typename Tape<T>::Var fuse_rows_tape(ParamBinder<T>& params, const FusionConfig& cfg,
                                     typename Tape<T>::Var e_f, typename Tape<T>::Var e_v);

// Fused content rows (n x d) for a batch of numeric tokens.
template <class T>
typename Tape<T>::Var fuse_numeric_tape(ParamBinder<T>& params, const FusionConfig& cfg,
                                        const NumericBatch<T>& batch);

// Categorical content rows W_cat [e_f ; e_c]; `rows` are cat_table rows.
template <class T>
typename Tape<T>::Var embed_categorical_tape(ParamBinder<T>& params,
                                             const std::vector<int>& features,
                                             const std::vector<int>& rows);

}  // namespace medfuse
