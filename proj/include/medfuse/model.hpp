#pragma once

#include "medfuse/data.hpp"
#include "medfuse/embedding.hpp"
#include "medfuse/encoder.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace medfuse {

struct ModelConfig {
  FusionConfig fusion;
  EncoderConfig encoder;
  TimeConfig time;

  void validate() const;
  static ModelConfig from_config(const KeyValueConfig& cfg);
  // [fusion], [encoder] and [time] sections, parseable by from_config.
  KeyValueConfig to_config() const;
};

template <class T>
struct Model {
  ModelConfig config;
  FeatureSchema schema;
  ParamStore<T> params;
  std::vector<int> category_offsets;
  std::vector<double> wavelengths;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> meta;  // free-form, saved with checkpoints
};

template <class T>
Model<T> make_model(const ModelConfig& cfg, const FeatureSchema& schema, std::uint64_t seed);

// Content vectors with time injected, one row per token (N x d).
template <class T>
typename Tape<T>::Var embed_tokens(ParamBinder<T>& params, const Model<T>& model,
                                   std::span<const Token> tokens);

// Class probabilities (B x 2) for a batch of non-empty sequences.
// `dropout_rng` switches the encoder to training mode.
template <class T>
typename Tape<T>::Var forward(ParamBinder<T>& params, const Model<T>& model,
                              std::span<const TokenSequence* const> batch, Rng* dropout_rng);

// P(label = 1) per sequence. Sequences are evaluated in fixed chunks, so the
// result does not depend on `threads`.
template <class T>
std::vector<double> predict(const Model<T>& model, std::span<const TokenSequence> seqs,
                            int threads = 1);

// Fused token content e_{f,v} (before time injection) and the output of
// encoder layer 1, for one sequence.
template <class T>
struct TokenStages {
  Matrix<T> post_fusion;
  Matrix<T> post_layer1;
};

template <class T>
TokenStages<T> token_stages(const Model<T>& model, const TokenSequence& seq);

// ---- checkpoints -----------------------------------------------------------------

// Text container: header lines, the model config, the schema it was trained
// against (with its hash) and every tensor as "tensor <name> <rows> <cols>"
// followed by hexfloat rows. Loading is exact in either precision.
template <class T>
std::string serialize_checkpoint(const Model<T>& model);

template <class T>
Model<T> deserialize_checkpoint(const std::string& text);

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path);

// Hash of all tensor values (name, shape, bits).
template <class T>
std::string params_hash(const ParamStore<T>& params);

}  // namespace medfuse
