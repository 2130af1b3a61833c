#pragma once

#include "medfuse/data.hpp"
#include "medfuse/model.hpp"

#include <vector>

namespace fixture {

inline medfuse::TokenizedDataset tiny_dataset(int entities = 60, std::uint64_t seed = 3, int window = 12) {
  medfuse::SyntheticSpec spec;
  spec.n_entities = entities;
  spec.n_numeric = 3;
  spec.n_categorical = 1;
  spec.window_length = window;
  spec.p_min = 0.3;
  spec.with_event_times = true;
  const medfuse::Cohort c = medfuse::generate_synthetic(spec, seed);
  return medfuse::tokenize_cohort(c, {spec.window_length, spec.bin_width, 0.0}, medfuse::SplitConfig{0.6, 0.2, seed});
}

inline medfuse::ModelConfig toy_config(medfuse::FusionKind kind = medfuse::FusionKind::kMuFuse, int d = 8,
                                       int layers = 1) {
  medfuse::ModelConfig m;
  auto& f = m.fusion;
  f.kind = kind;
  f.d = d;
  f.projector_hidden = 4;
  f.d_c = 3;
  switch (kind) {
    case medfuse::FusionKind::kMuFuse: f.k = 2; f.d_prime = d / 2; break;
    case medfuse::FusionKind::kScane: f.k = d; f.d_prime = 1; break;
    case medfuse::FusionKind::kAdditive: f.k = 1; f.d_prime = d; break;
    case medfuse::FusionKind::kConcat: f.k = 1; f.d_prime = d / 2; break;
  }
  m.encoder.d_model = d;
  m.encoder.ff_dim = d;
  m.encoder.num_layers = layers;
  m.encoder.num_heads = 2;
  m.encoder.dropout = 0.0;
  m.validate();
  return m;
}

inline std::vector<const medfuse::TokenSequence*> pointers(const std::vector<medfuse::TokenSequence>& seqs,
                                                           std::size_t n) {
  std::vector<const medfuse::TokenSequence*> out;
  for (std::size_t i = 0; i < std::min(n, seqs.size()); ++i) out.push_back(&seqs[i]);
  return out;
}

}  // namespace fixture
