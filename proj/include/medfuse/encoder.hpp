#pragma once

#include "medfuse/autodiff.hpp"
#include "medfuse/config.hpp"

#include <cstdint>
#include <vector>

namespace medfuse {

struct EncoderConfig {
  int d_model = 144;
  int ff_dim = 144;
  int num_layers = 2;
  int num_heads = 4;
  double dropout = 0.1;
  int max_seq_len = 4096;

  void validate() const;
  static EncoderConfig from_config(const KeyValueConfig& cfg, int d_model);
};

// B x S x d token embeddings (zero rows at pads), with pad_mask[b][s] true
// for real tokens.
template <class T>
struct BatchInput {
  std::vector<Matrix<T>> token_embeddings;
  std::vector<std::vector<std::uint8_t>> pad_mask;
  std::vector<int> labels;
  std::vector<int> lengths;
};

// Tensors, per layer l:
//   encoder.<l>.ln1.{gain,bias}, encoder.<l>.attn.{wq,bq,wk,bk,wv,bv,wo,bo},
//   encoder.<l>.ln2.{gain,bias}, encoder.<l>.ff.{w1,b1,w2,b2}
// then encoder.final_ln.{gain,bias} and head.{w,b} (2 x d, 1 x 2).
template <class T>
void init_encoder_params(ParamStore<T>& store, const EncoderConfig& cfg, std::uint64_t seed);

// Pre-norm transformer stack over one sequence (S x d). Keys with
// key_mask == 0 are never attended to. `dropout_rng` enables dropout.
// When `layer_outputs` is given it receives the output of every layer.
template <class T>
typename Tape<T>::Var encode_sequence(ParamBinder<T>& params, const EncoderConfig& cfg,
                                      typename Tape<T>::Var x, std::span<const std::uint8_t> key_mask,
                                      Rng* dropout_rng,
                                      std::vector<typename Tape<T>::Var>* layer_outputs = nullptr);

// Masked mean-pool then the linear head: 1 x 2 logits.
template <class T>
typename Tape<T>::Var classify_sequence(ParamBinder<T>& params, typename Tape<T>::Var encoded,
                                        std::span<const std::uint8_t> mask);

// Forward-only batch APIs over padded inputs.
template <class T>
std::vector<Matrix<T>> encode(const BatchInput<T>& batch, const ParamStore<T>& params,
                              const EncoderConfig& cfg);

// B x 2 class probabilities.
template <class T>
Matrix<T> pool_and_classify(const std::vector<Matrix<T>>& encoded,
                            const std::vector<std::vector<std::uint8_t>>& pad_mask,
                            const ParamStore<T>& params);

}  // namespace medfuse
