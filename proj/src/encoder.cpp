#include "medfuse/encoder.hpp"

#include <cmath>
#include <string>

namespace medfuse {

void EncoderConfig::validate() const {
  if (d_model <= 0 || ff_dim <= 0 || num_layers < 0 || num_heads <= 0) {
    throw ConfigError("encoder: d_model, ff_dim, num_heads must be positive and num_layers >= 0");
  }
  if (d_model % num_heads != 0) {
    throw ConfigError("encoder: d_model=" + std::to_string(d_model) +
                      " is not divisible by num_heads=" + std::to_string(num_heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder: dropout must lie in [0, 1)");
}

EncoderConfig EncoderConfig::from_config(const KeyValueConfig& cfg, int d_model) {
  EncoderConfig e;
  e.d_model = d_model;
  e.ff_dim = static_cast<int>(cfg.get_int("encoder.ff_dim", e.ff_dim));
  e.num_layers = static_cast<int>(cfg.get_int("encoder.num_layers", e.num_layers));
  e.num_heads = static_cast<int>(cfg.get_int("encoder.num_heads", e.num_heads));
  e.dropout = cfg.get_double("encoder.dropout", e.dropout);
  e.max_seq_len = static_cast<int>(cfg.get_int("encoder.max_seq_len", e.max_seq_len));
  e.validate();
  return e;
}

namespace {

template <class T>
Matrix<T> uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, std::uint64_t seed,
                       const std::string& name) {
  Rng rng = make_stream(seed, "init." + name);
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

std::string layer_key(int l, const char* rest) { return "encoder." + std::to_string(l) + "." + rest; }

}  // namespace

template <class T>
void init_encoder_params(ParamStore<T>& store, const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int d = cfg.d_model, ff = cfg.ff_dim;
  auto linear = [&](const std::string& w, const std::string& b, int out, int in) {
    store.add(w, uniform_init<T>(out, in, 1.0 / std::sqrt(static_cast<double>(in)), seed, w));
    store.add(b, Matrix<T>::Zero(1, out));
  };
  auto norm = [&](const std::string& prefix) {
    store.add(prefix + ".gain", Matrix<T>::Ones(1, d));
    store.add(prefix + ".bias", Matrix<T>::Zero(1, d));
  };
  for (int l = 0; l < cfg.num_layers; ++l) {
    norm(layer_key(l, "ln1"));
    linear(layer_key(l, "attn.wq"), layer_key(l, "attn.bq"), d, d);
    linear(layer_key(l, "attn.wk"), layer_key(l, "attn.bk"), d, d);
    linear(layer_key(l, "attn.wv"), layer_key(l, "attn.bv"), d, d);
    linear(layer_key(l, "attn.wo"), layer_key(l, "attn.bo"), d, d);
    norm(layer_key(l, "ln2"));
    linear(layer_key(l, "ff.w1"), layer_key(l, "ff.b1"), ff, d);
    linear(layer_key(l, "ff.w2"), layer_key(l, "ff.b2"), d, ff);
  }
  norm("encoder.final_ln");
  linear("head.w", "head.b", 2, d);
}

template <class T>
typename Tape<T>::Var encode_sequence(ParamBinder<T>& p, const EncoderConfig& cfg,
                                      typename Tape<T>::Var x, std::span<const std::uint8_t> key_mask,
                                      Rng* dropout_rng,
                                      std::vector<typename Tape<T>::Var>* layer_outputs) {
  Tape<T>& tape = p.tape();
  if (tape.rows(x) == 0) throw ContractError("encode: empty sequence");
  if (tape.rows(x) > cfg.max_seq_len) throw ContractError("encode: sequence longer than max_seq_len");
  auto drop = [&](typename Tape<T>::Var v) {
    return dropout_rng ? tape.dropout(v, cfg.dropout, *dropout_rng) : v;
  };
  for (int l = 0; l < cfg.num_layers; ++l) {
    auto h = tape.layer_norm(x, p(layer_key(l, "ln1.gain")), p(layer_key(l, "ln1.bias")));
    auto q = tape.linear(h, p(layer_key(l, "attn.wq")), p(layer_key(l, "attn.bq")));
    auto k = tape.linear(h, p(layer_key(l, "attn.wk")), p(layer_key(l, "attn.bk")));
    auto v = tape.linear(h, p(layer_key(l, "attn.wv")), p(layer_key(l, "attn.bv")));
    auto ctx = tape.attention(q, k, v, cfg.num_heads, key_mask);
    auto o = tape.linear(ctx, p(layer_key(l, "attn.wo")), p(layer_key(l, "attn.bo")));
    x = tape.add(x, drop(o));
    auto h2 = tape.layer_norm(x, p(layer_key(l, "ln2.gain")), p(layer_key(l, "ln2.bias")));
    auto f = tape.relu(tape.linear(h2, p(layer_key(l, "ff.w1")), p(layer_key(l, "ff.b1"))));
    f = tape.linear(f, p(layer_key(l, "ff.w2")), p(layer_key(l, "ff.b2")));
    x = tape.add(x, drop(f));
    if (layer_outputs) layer_outputs->push_back(x);
  }
  return tape.layer_norm(x, p("encoder.final_ln.gain"), p("encoder.final_ln.bias"));
}

template <class T>
typename Tape<T>::Var classify_sequence(ParamBinder<T>& p, typename Tape<T>::Var encoded,
                                        std::span<const std::uint8_t> mask) {
  Tape<T>& tape = p.tape();
  auto pooled = tape.masked_mean_rows(encoded, mask);
  return tape.linear(pooled, p("head.w"), p("head.b"));
}

template <class T>
std::vector<Matrix<T>> encode(const BatchInput<T>& batch, const ParamStore<T>& params,
                              const EncoderConfig& cfg) {
  if (batch.token_embeddings.size() != batch.pad_mask.size()) {
    throw ShapeError("encode: embeddings and pad_mask disagree on batch size");
  }
  std::vector<Matrix<T>> out;
  for (std::size_t b = 0; b < batch.token_embeddings.size(); ++b) {
    const auto& x = batch.token_embeddings[b];
    const auto& mask = batch.pad_mask[b];
    if (x.cols() != cfg.d_model || static_cast<std::size_t>(x.rows()) != mask.size()) {
      throw ShapeError("encode: row " + std::to_string(b) + " has the wrong shape");
    }
    bool any = false;
    for (auto m : mask) any = any || m;
    if (!any) throw ContractError("encode: sequence " + std::to_string(b) + " has no real token");
    Tape<T> tape;
    ParamBinder<T> binder(tape, params);
    auto y = encode_sequence<T>(binder, cfg, tape.constant(x), mask, nullptr);
    out.push_back(tape.value(y));
  }
  return out;
}

template <class T>
Matrix<T> pool_and_classify(const std::vector<Matrix<T>>& encoded,
                            const std::vector<std::vector<std::uint8_t>>& pad_mask,
                            const ParamStore<T>& params) {
  if (encoded.size() != pad_mask.size()) throw ShapeError("pool_and_classify: batch size mismatch");
  Matrix<T> probs(static_cast<Eigen::Index>(encoded.size()), 2);
  for (std::size_t b = 0; b < encoded.size(); ++b) {
    Tape<T> tape;
    ParamBinder<T> binder(tape, params);
    auto logits = classify_sequence<T>(binder, tape.constant(encoded[b]), pad_mask[b]);
    probs.row(static_cast<Eigen::Index>(b)) = Tape<T>::softmax_rows_of(tape.value(logits)).row(0);
  }
  return probs;
}

#define MEDFUSE_INSTANTIATE(T)                                                                     \
  template void init_encoder_params<T>(ParamStore<T>&, const EncoderConfig&, std::uint64_t);       \
  template Tape<T>::Var encode_sequence<T>(ParamBinder<T>&, const EncoderConfig&, Tape<T>::Var,    \
                                           std::span<const std::uint8_t>, Rng*,                    \
                                           std::vector<Tape<T>::Var>*);                            \
  template Tape<T>::Var classify_sequence<T>(ParamBinder<T>&, Tape<T>::Var,                        \
                                             std::span<const std::uint8_t>);                       \
  template std::vector<Matrix<T>> encode<T>(const BatchInput<T>&, const ParamStore<T>&,            \
                                            const EncoderConfig&);                                 \
  template Matrix<T> pool_and_classify<T>(const std::vector<Matrix<T>>&,                           \
                                          const std::vector<std::vector<std::uint8_t>>&,           \
                                          const ParamStore<T>&);

MEDFUSE_INSTANTIATE(float)
MEDFUSE_INSTANTIATE(double)

#undef MEDFUSE_INSTANTIATE

}  // namespace medfuse
