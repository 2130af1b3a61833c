#include "medfuse/model.hpp"

#include "medfuse/io.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <sstream>
#include <thread>

namespace medfuse {

void ModelConfig::validate() const {
  fusion.validate();
  encoder.validate();
  if (encoder.d_model != fusion.d) {
    throw ConfigError("encoder width " + std::to_string(encoder.d_model) +
                      " differs from token width d=" + std::to_string(fusion.d));
  }
  if (fusion.d % 2 != 0) throw ConfigError("token width d must be even for the time encoding");
}

ModelConfig ModelConfig::from_config(const KeyValueConfig& cfg) {
  ModelConfig m;
  m.fusion = FusionConfig::from_config(cfg);
  m.encoder = EncoderConfig::from_config(cfg, m.fusion.d);
  m.time = TimeConfig::from_config(cfg);
  m.validate();
  return m;
}

KeyValueConfig ModelConfig::to_config() const {
  KeyValueConfig c;
  auto num = [](double v) { return io::format_double(v); };
  c.set("fusion.kind", to_string(fusion.kind));
  c.set("fusion.d", std::to_string(fusion.d));
  c.set("fusion.d_prime", std::to_string(fusion.d_prime));
  if (fusion.kind == FusionKind::kMuFuse) c.set("fusion.k", std::to_string(fusion.k));
  c.set("fusion.projector_hidden", std::to_string(fusion.projector_hidden));
  c.set("fusion.d_c", std::to_string(fusion.d_c));
  c.set("encoder.ff_dim", std::to_string(encoder.ff_dim));
  c.set("encoder.num_layers", std::to_string(encoder.num_layers));
  c.set("encoder.num_heads", std::to_string(encoder.num_heads));
  c.set("encoder.dropout", num(encoder.dropout));
  c.set("encoder.max_seq_len", std::to_string(encoder.max_seq_len));
  c.set("time.mode", to_string(time.mode));
  c.set("time.omega_min", num(time.omega_min));
  c.set("time.omega_max", num(time.omega_max));
  return c;
}

template <class T>
Model<T> make_model(const ModelConfig& cfg, const FeatureSchema& schema, std::uint64_t seed) {
  cfg.validate();
  if (schema.size() == 0) throw SchemaError("model needs at least one feature");
  Model<T> m;
  m.config = cfg;
  m.schema = schema;
  m.seed = seed;
  m.category_offsets = schema.category_offsets();
  m.wavelengths = time_wavelengths(cfg.fusion.d, cfg.time.omega_min, cfg.time.omega_max);
  init_embedding_params<T>(m.params, cfg.fusion, schema.size(), schema.total_categories(), seed);
  init_encoder_params<T>(m.params, cfg.encoder, seed);
  return m;
}

namespace {

template <class T>
typename Tape<T>::Var embed_content(ParamBinder<T>& p, const Model<T>& model,
                                    std::span<const Token> tokens) {
  Tape<T>& tape = p.tape();
  NumericBatch<T> num;
  std::vector<int> num_dst, cat_features, cat_rows, cat_dst;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token& t = tokens[i];
    if (t.feature_id < 0 || t.feature_id >= model.schema.size()) {
      throw IndexError("token feature " + std::to_string(t.feature_id) + " outside the schema");
    }
    if (t.kind == FeatureKind::kNumeric) {
      num.features.push_back(t.feature_id);
      num.values.push_back(static_cast<T>(t.value));
      num_dst.push_back(static_cast<int>(i));
    } else {
      const auto& info = model.schema.at(t.feature_id);
      if (t.category < 0 || t.category >= info.n_categories) {
        throw IndexError("class " + std::to_string(t.category) + " out of vocabulary for " + info.name);
      }
      cat_features.push_back(t.feature_id);
      cat_rows.push_back(model.category_offsets[t.feature_id] + t.category);
      cat_dst.push_back(static_cast<int>(i));
    }
  }
  std::vector<std::pair<typename Tape<T>::Var, std::vector<int>>> parts;
  if (!num_dst.empty()) {
    parts.emplace_back(fuse_numeric_tape<T>(p, model.config.fusion, num), std::move(num_dst));
  }
  if (!cat_dst.empty()) {
    parts.emplace_back(embed_categorical_tape<T>(p, cat_features, cat_rows), std::move(cat_dst));
  }
  if (parts.size() == 1 && parts[0].second.size() == tokens.size()) return parts[0].first;
  return tape.scatter_rows(parts, static_cast<Eigen::Index>(tokens.size()), model.config.fusion.d);
}

template <class T>
typename Tape<T>::Var add_time(Tape<T>& tape, const Model<T>& model, std::span<const Token> tokens,
                               typename Tape<T>::Var content) {
  const int d = model.config.fusion.d;
  Matrix<T> pt(static_cast<Eigen::Index>(tokens.size()), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    pt.row(static_cast<Eigen::Index>(i)) =
        time_encoding<T>(tokens[i].time, d, model.wavelengths).transpose();
  }
  if (model.config.time.mode == TimeMode::kAdd) return tape.add(content, tape.constant(std::move(pt)));
  return tape.hadamard(content, tape.constant(Tape<T>::sigmoid_of(pt)));
}

}  // namespace

template <class T>
typename Tape<T>::Var embed_tokens(ParamBinder<T>& p, const Model<T>& model,
                                   std::span<const Token> tokens) {
  if (tokens.empty()) throw ContractError("embed_tokens: no tokens");
  return add_time<T>(p.tape(), model, tokens, embed_content<T>(p, model, tokens));
}

template <class T>
typename Tape<T>::Var forward(ParamBinder<T>& p, const Model<T>& model,
                              std::span<const TokenSequence* const> batch, Rng* dropout_rng) {
  if (batch.empty()) throw ContractError("forward: empty batch");
  Tape<T>& tape = p.tape();
  std::vector<Token> flat;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> spans;
  for (const TokenSequence* s : batch) {
    if (s->tokens.empty()) throw ContractError("sequence " + s->entity_id + " has no tokens");
    spans.emplace_back(static_cast<Eigen::Index>(flat.size()),
                       static_cast<Eigen::Index>(s->tokens.size()));
    flat.insert(flat.end(), s->tokens.begin(), s->tokens.end());
  }
  auto x = embed_tokens<T>(p, model, flat);
  std::vector<typename Tape<T>::Var> logits;
  logits.reserve(batch.size());
  for (auto [start, len] : spans) {
    auto xs = spans.size() == 1 ? x : tape.slice_rows(x, start, len);
    auto h = encode_sequence<T>(p, model.config.encoder, xs, {}, dropout_rng);
    logits.push_back(classify_sequence<T>(p, h, {}));
  }
  auto stacked = logits.size() == 1 ? logits[0] : tape.stack_rows(logits);
  return tape.softmax_rows(stacked);
}

template <class T>
std::vector<double> predict(const Model<T>& model, std::span<const TokenSequence> seqs, int threads) {
  constexpr std::size_t kChunk = 64;
  std::vector<double> out(seqs.size());
  const std::size_t n_chunks = (seqs.size() + kChunk - 1) / kChunk;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t c = next++; c < n_chunks; c = next++) {
      const std::size_t lo = c * kChunk, hi = std::min(seqs.size(), lo + kChunk);
      std::vector<const TokenSequence*> batch;
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&seqs[i]);
      Tape<T> tape;
      ParamBinder<T> binder(tape, model.params);
      auto probs = forward<T>(binder, model, batch, nullptr);
      for (std::size_t i = lo; i < hi; ++i) {
        out[i] = static_cast<double>(tape.value(probs)(static_cast<Eigen::Index>(i - lo), 1));
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(n_chunks)));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          worker();
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return out;
}

template <class T>
TokenStages<T> token_stages(const Model<T>& model, const TokenSequence& seq) {
  if (seq.tokens.empty()) throw ContractError("sequence " + seq.entity_id + " has no tokens");
  Tape<T> tape;
  ParamBinder<T> binder(tape, model.params);
  auto content = embed_content<T>(binder, model, seq.tokens);
  auto x = add_time<T>(tape, model, seq.tokens, content);
  std::vector<typename Tape<T>::Var> layers;
  encode_sequence<T>(binder, model.config.encoder, x, {}, nullptr, &layers);
  TokenStages<T> out;
  out.post_fusion = tape.value(content);
  out.post_layer1 = layers.empty() ? tape.value(x) : tape.value(layers.front());
  return out;
}

// ---- checkpoints -------------------------------------------------------------------

namespace {

constexpr const char* kMagic = "medfuse-checkpoint 1";

std::string hexfloat(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::hex);
  return std::string(buf, res.ptr);
}

double parse_hexfloat(std::string_view s) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::hex);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("checkpoint: bad tensor value '" + std::string(s) + "'");
  }
  return v;
}

template <class T>
std::string tensor_block(const ParamStore<T>& params) {
  std::string out;
  for (const auto& p : params.all()) {
    out += "tensor " + p.name + " " + std::to_string(p.value.rows()) + " " +
           std::to_string(p.value.cols()) + "\n";
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
        if (c) out += ' ';
        out += hexfloat(static_cast<double>(p.value(r, c)));
      }
      out += '\n';
    }
  }
  return out;
}

void append_block(std::string& out, const std::string& tag, const std::string& text) {
  std::size_t lines = 0;
  for (char ch : text) lines += ch == '\n';
  if (!text.empty() && text.back() != '\n') ++lines;
  out += tag + " " + std::to_string(lines) + "\n" + text;
  if (!text.empty() && text.back() != '\n') out += '\n';
}

}  // namespace

template <class T>
std::string params_hash(const ParamStore<T>& params) {
  return io::content_hash(tensor_block(params));
}

template <class T>
std::string serialize_checkpoint(const Model<T>& model) {
  std::string out = std::string(kMagic) + "\n";
  out += std::string("precision ") + (std::is_same_v<T, float> ? "32" : "64") + "\n";
  out += "seed " + std::to_string(model.seed) + "\n";
  out += "schema_hash " + model.schema.hash() + "\n";
  for (const auto& [k, v] : model.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint meta entries must be single-line, key without spaces");
    }
    out += "meta " + k + " " + v + "\n";
  }
  append_block(out, "config", model.config.to_config().dump());
  append_block(out, "schema", model.schema.serialize());
  out += tensor_block(model.params);
  out += "end\n";
  return out;
}

template <class T>
Model<T> deserialize_checkpoint(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto next = [&]() -> std::string& {
    if (!std::getline(in, line)) throw ConfigError("checkpoint: truncated at line " + std::to_string(line_no));
    ++line_no;
    return line;
  };
  auto fail = [&](const std::string& what) -> ConfigError {
    return ConfigError("checkpoint line " + std::to_string(line_no) + ": " + what);
  };
  if (next() != kMagic) throw fail("not a medfuse checkpoint");

  std::uint64_t seed = 0;
  std::string schema_hash, config_text, schema_text;
  std::map<std::string, std::string> meta;
  ParamStore<T> params;
  auto read_block = [&](std::size_t n) {
    std::string block;
    for (std::size_t i = 0; i < n; ++i) block += next() + "\n";
    return block;
  };
  bool done = false;
  while (!done) {
    std::istringstream head(next());
    std::string tag;
    head >> tag;
    if (tag == "precision") {
      continue;
    } else if (tag == "seed") {
      head >> seed;
    } else if (tag == "schema_hash") {
      head >> schema_hash;
    } else if (tag == "meta") {
      std::string key;
      head >> key;
      std::string value;
      std::getline(head, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      meta[key] = value;
    } else if (tag == "config" || tag == "schema") {
      std::size_t n = 0;
      if (!(head >> n)) throw fail("missing line count");
      (tag == "config" ? config_text : schema_text) = read_block(n);
    } else if (tag == "tensor") {
      std::string name;
      Eigen::Index rows = 0, cols = 0;
      if (!(head >> name >> rows >> cols) || rows < 0 || cols < 0) throw fail("bad tensor header");
      Matrix<T> m(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        std::istringstream row(next());
        std::string tok;
        for (Eigen::Index c = 0; c < cols; ++c) {
          if (!(row >> tok)) throw fail("tensor " + name + " row too short");
          m(r, c) = static_cast<T>(parse_hexfloat(tok));
        }
      }
      params.add(name, std::move(m));
    } else if (tag == "end") {
      done = true;
    } else {
      throw fail("unknown entry '" + tag + "'");
    }
  }

  Model<T> model;
  model.config = ModelConfig::from_config(KeyValueConfig::parse(config_text, "checkpoint config"));
  model.schema = FeatureSchema::deserialize(schema_text);
  if (model.schema.hash() != schema_hash) throw SchemaError("checkpoint: schema hash mismatch");
  model.seed = seed;
  model.meta = std::move(meta);
  model.category_offsets = model.schema.category_offsets();
  model.wavelengths = time_wavelengths(model.config.fusion.d, model.config.time.omega_min,
                                       model.config.time.omega_max);
  // Shapes must match a freshly built model of the same config.
  Model<T> ref = make_model<T>(model.config, model.schema, seed);
  if (ref.params.all().size() != params.all().size()) throw ConfigError("checkpoint: tensor set differs from config");
  for (const auto& p : ref.params.all()) {
    if (!params.contains(p.name)) throw ConfigError("checkpoint: missing tensor " + p.name);
    const auto& got = params.at(p.name).value;
    if (got.rows() != p.value.rows() || got.cols() != p.value.cols()) {
      throw ShapeError("checkpoint: tensor " + p.name + " has the wrong shape");
    }
    model.params.add(p.name, got);
  }
  return model;
}

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(model));
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  return deserialize_checkpoint<T>(io::read_file(path));
}

#define MEDFUSE_INSTANTIATE(T)                                                                   \
  template Model<T> make_model<T>(const ModelConfig&, const FeatureSchema&, std::uint64_t);      \
  template Tape<T>::Var embed_tokens<T>(ParamBinder<T>&, const Model<T>&, std::span<const Token>); \
  template Tape<T>::Var forward<T>(ParamBinder<T>&, const Model<T>&,                             \
                                   std::span<const TokenSequence* const>, Rng*);                 \
  template std::vector<double> predict<T>(const Model<T>&, std::span<const TokenSequence>, int); \
  template TokenStages<T> token_stages<T>(const Model<T>&, const TokenSequence&);                \
  template std::string serialize_checkpoint<T>(const Model<T>&);                                 \
  template Model<T> deserialize_checkpoint<T>(const std::string&);                               \
  template void save_checkpoint<T>(const Model<T>&, const std::filesystem::path&);               \
  template Model<T> load_checkpoint<T>(const std::filesystem::path&);                            \
  template std::string params_hash<T>(const ParamStore<T>&);

MEDFUSE_INSTANTIATE(float)
MEDFUSE_INSTANTIATE(double)

#undef MEDFUSE_INSTANTIATE

}  // namespace medfuse
