#pragma once

// The recognizer network: a pooled deep bidirectional LSTM encoder, MLP
// attention with a multiplicative fertility gate fed by accumulated
// attention weights, a single-cell LSTM decoder with a maxout readout, and
// an auxiliary per-frame projection over the same vocabulary used by the
// CTC loss.  Also home of the binary checkpoint format.

#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "attnlab/bpe.hpp"
#include "attnlab/io.hpp"
#include "attnlab/tensor.hpp"

namespace attnlab {

// ---------------------------------------------------------------------------
// configuration

inline std::string format_real(real v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Everything needed to rebuild the parameter set from scratch.  The
// embedding width is tied to the decoder width; the readout hidden layer is
// fixed at twice the decoder width and halved again by the maxout.
struct ModelConfig {
  size_t input_dim = 40;
  size_t enc_units = 64;   // per direction
  size_t enc_layers = 2;
  std::vector<size_t> pooling{2, 2};  // time reduction after each layer
  size_t dec_units = 128;
  size_t att_dim = 128;
  size_t vocab = 0;
  real dropout = 0.3;
  uint64_t seed = 0;

  size_t reduction() const {
    size_t r = 1;
    for (size_t f : pooling) r *= f;
    return r;
  }

  std::string canonical() const {
    std::ostringstream o;
    o << "att_dim=" << att_dim << "\n";
    o << "dec_units=" << dec_units << "\n";
    o << "dropout=" << format_real(dropout) << "\n";
    o << "enc_layers=" << enc_layers << "\n";
    o << "enc_units=" << enc_units << "\n";
    o << "input_dim=" << input_dim << "\n";
    o << "pooling=";
    for (size_t i = 0; i < pooling.size(); ++i) o << (i ? "," : "") << pooling[i];
    o << "\n";
    o << "seed=" << seed << "\n";
    o << "vocab=" << vocab << "\n";
    return o.str();
  }

  static ModelConfig parse(const std::string& text) {
    ModelConfig c;
    c.pooling.clear();
    std::map<std::string, bool> seen;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      size_t eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("model config: missing '=' in \"" + line + "\"");
      std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      if (seen[key]) throw FormatError("model config: duplicate key " + key);
      seen[key] = true;
      try {
        if (key == "att_dim") c.att_dim = std::stoull(val);
        else if (key == "dec_units") c.dec_units = std::stoull(val);
        else if (key == "dropout") c.dropout = std::stod(val);
        else if (key == "enc_layers") c.enc_layers = std::stoull(val);
        else if (key == "enc_units") c.enc_units = std::stoull(val);
        else if (key == "input_dim") c.input_dim = std::stoull(val);
        else if (key == "seed") c.seed = std::stoull(val);
        else if (key == "vocab") c.vocab = std::stoull(val);
        else if (key == "pooling") {
          std::istringstream ps(val);
          std::string tok;
          while (std::getline(ps, tok, ',')) c.pooling.push_back(std::stoull(tok));
        } else {
          throw FormatError("model config: unknown key " + key);
        }
      } catch (const std::invalid_argument&) {
        throw FormatError("model config: bad value for " + key + ": " + val);
      } catch (const std::out_of_range&) {
        throw FormatError("model config: bad value for " + key + ": " + val);
      }
    }
    const char* required[] = {"att_dim", "dec_units", "dropout",   "enc_layers", "enc_units",
                              "input_dim", "pooling",   "seed", "vocab"};
    for (const char* k : required)
      if (!seen[k]) throw FormatError(std::string("model config: missing key ") + k);
    return c;
  }
};

// ---------------------------------------------------------------------------
// attention pieces, usable standalone

// beta_t = sigmoid(v_beta . h_t) * accumulated attention mass at t
inline Tensor fertility_feedback(Tape& t, const Tensor& enc_h, const Tensor& cum_alpha,
                                 const Tensor& v_beta) {
  if (cum_alpha.numel() != enc_h.rows())
    throw DimError("fertility_feedback: accumulator length must match frame count");
  return mul(t, sigmoid(t, matvec(t, enc_h, v_beta)), cum_alpha);
}

// e_t = v . tanh(W [s; h_t; beta_t])
inline Tensor attention_energies(Tape& t, const Tensor& s, const Tensor& enc_h, const Tensor& beta,
                                 const Tensor& W, const Tensor& v) {
  size_t frames = enc_h.rows();
  if (beta.numel() != frames) throw DimError("attention_energies: beta length must match frame count");
  std::vector<Tensor> e(frames);
  for (size_t f = 0; f < frames; ++f) {
    Tensor in = concat(t, {s, row(t, enc_h, f), slice(t, beta, f, 1)});
    e[f] = dot(t, v, tanh(t, matvec(t, W, in)));
  }
  return concat(t, e);
}

// c = sum_t alpha_t h_t
inline Tensor attend(Tape& t, const Tensor& alpha, const Tensor& enc_h) {
  return vecmat(t, alpha, enc_h);
}

// ---------------------------------------------------------------------------
// the model

// Per-utterance decoder recurrence; the cumulative attention vector is what
// the fertility gate sees, so after i steps its entries sum to i.
struct DecState {
  Tensor h;          // decoder LSTM output s_i
  Tensor c;          // decoder LSTM cell
  Tensor context;    // context vector entering the next step
  Tensor cum_alpha;  // sum of all past attention weight vectors
};

class Model {
 public:
  struct StepOut {
    Tensor dist;   // next-token distribution, length vocab
    Tensor alpha;  // attention weights, length T'
    DecState state;
  };
  struct Forward {
    Tensor enc_h;                // T' x 2u
    std::vector<Tensor> dists;   // one per output position (targets + EOS)
    std::vector<Tensor> alphas;  // matching attention weights
  };

  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) { build_(); }

  const ModelConfig& config() const { return cfg_; }
  const std::map<std::string, Tensor>& params() const { return params_; }

  Tensor& p(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw DimError("model: no parameter named " + name);
    return it->second;
  }
  const Tensor& p(const std::string& name) const { return const_cast<Model*>(this)->p(name); }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : params_) out.push_back(t);
    return out;
  }

  // Alternating bilstm / max-pool stack; dropout only when both requested
  // and configured.  feats: T x input_dim -> T' x 2u.
  Tensor encode(Tape& t, const Tensor& feats, bool train = false, Rng* drop = nullptr) const {
    if (feats.rank() != 2 || feats.cols() != cfg_.input_dim)
      throw DimError("encode: features must be T x input_dim");
    Tensor x = feats;
    for (size_t k = 0; k < cfg_.enc_layers; ++k) {
      x = bilstm_layer(t, x, enc_weights(k, true), enc_weights(k, false));
      if (cfg_.pooling[k] > 1) x = max_pool_time(t, x, cfg_.pooling[k]);
      if (train && drop && cfg_.dropout > 0) x = dropout(t, x, cfg_.dropout, *drop);
    }
    return x;
  }

  DecState init_state(size_t frames) const {
    return {Tensor::zeros({cfg_.dec_units}), Tensor::zeros({cfg_.dec_units}),
            Tensor::zeros({2 * cfg_.enc_units}), Tensor::zeros({frames})};
  }

  // One decoder step: the LSTM cell sees the *previous* context, the
  // readout sees the *current* one, and the fertility gate sees the
  // attention mass accumulated before this step.
  StepOut decoder_step(Tape& t, const Tensor& enc_h, const DecState& st, int y_prev) const {
    if (y_prev < 0 || static_cast<size_t>(y_prev) >= cfg_.vocab)
      throw DimError("decoder_step: token id out of range");
    Tensor emb = row(t, p("embed"), static_cast<size_t>(y_prev));
    LstmOut s = lstm_step(t, concat(t, {emb, st.context}), st.h, st.c, dec_weights());
    Tensor beta = fertility_feedback(t, enc_h, st.cum_alpha, p("att.v_beta"));
    Tensor alpha = softmax(t, attention_energies(t, s.h, enc_h, beta, p("att.W"), p("att.v")));
    Tensor ctx = attend(t, alpha, enc_h);
    Tensor hidden = maxout(t, add(t, matvec(t, p("readout.w1"), concat(t, {s.h, emb, ctx})),
                                  p("readout.b1")));
    Tensor dist = softmax(t, add(t, matvec(t, p("readout.w2"), hidden), p("readout.b2")));
    DecState next{s.h, s.c, ctx, add(t, st.cum_alpha, alpha)};
    return {dist, alpha, std::move(next)};
  }

  // Per-frame distributions over the full vocabulary for the CTC loss; the
  // reserved <blank> id never occurs in text targets and serves as blank.
  std::vector<Tensor> ctc_frame_dists(Tape& t, const Tensor& enc_h) const {
    std::vector<Tensor> out(enc_h.rows());
    for (size_t f = 0; f < enc_h.rows(); ++f)
      out[f] = softmax(t, add(t, matvec(t, p("ctc.w"), row(t, enc_h, f)), p("ctc.b")));
    return out;
  }

  // Encode, then run |tokens|+1 decoder steps feeding the gold history;
  // dists[i] is the model's distribution for target position i where the
  // target sequence is tokens followed by EOS.
  Forward forward_teacher_forced(Tape& t, const Tensor& feats, const std::vector<int>& tokens,
                                 bool train = false, Rng* drop = nullptr) const {
    Forward out;
    out.enc_h = encode(t, feats, train, drop);
    DecState st = init_state(out.enc_h.rows());
    for (size_t i = 0; i < tokens.size() + 1; ++i) {
      StepOut so = decoder_step(t, out.enc_h, st, i == 0 ? kBosId : tokens[i - 1]);
      out.dists.push_back(so.dist);
      out.alphas.push_back(so.alpha);
      st = std::move(so.state);
    }
    return out;
  }

  LstmWeights enc_weights(size_t layer, bool fwd) const {
    std::string prefix = "enc.l" + std::to_string(layer) + (fwd ? ".fwd" : ".bwd");
    return {p(prefix + ".w"), p(prefix + ".b")};
  }
  LstmWeights dec_weights() const { return {p("dec.w"), p("dec.b")}; }

 private:
  ModelConfig cfg_;
  std::map<std::string, Tensor> params_;

  static uint64_t name_hash_(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  // Every parameter draws from its own stream keyed by name, so growing
  // the encoder initializes the new layer exactly as a fresh model would.
  Rng rng_for_(const std::string& name) const { return Rng::derive(cfg_.seed, name_hash_(name)); }

  void add_(const std::string& name, Tensor t) {
    t.set_requires_grad();
    params_[name] = std::move(t);
  }
  void make_mat_(const std::string& name, size_t r, size_t c) {
    Rng rng = rng_for_(name);
    add_(name, Tensor::glorot(r, c, rng));
  }
  void make_vec_(const std::string& name, size_t n) {
    Rng rng = rng_for_(name);
    Tensor t = Tensor::zeros({n});
    real s = std::sqrt(6.0 / static_cast<real>(n + 1));
    for (real& v : t.value()) v = rng.uniform(-s, s);
    add_(name, std::move(t));
  }
  void make_lstm_(const std::string& prefix, size_t input_dim, size_t units) {
    Rng rng = rng_for_(prefix);
    LstmWeights lw = LstmWeights::init(input_dim, units, rng);
    add_(prefix + ".w", lw.w);
    add_(prefix + ".b", lw.b);
  }

  void build_() {
    if (cfg_.enc_layers < 2) throw DimError("model: at least two encoder layers required");
    if (cfg_.pooling.size() != cfg_.enc_layers)
      throw DimError("model: one pooling factor per encoder layer required");
    for (size_t f : cfg_.pooling)
      if (f == 0) throw DimError("model: pooling factors must be positive");
    if (cfg_.vocab < 2) throw DimError("model: vocabulary too small");
    if (cfg_.input_dim == 0 || cfg_.enc_units == 0 || cfg_.dec_units == 0 || cfg_.att_dim == 0)
      throw DimError("model: widths must be positive");

    size_t u2 = 2 * cfg_.enc_units;
    for (size_t k = 0; k < cfg_.enc_layers; ++k) {
      size_t in = k == 0 ? cfg_.input_dim : u2;
      make_lstm_("enc.l" + std::to_string(k) + ".fwd", in, cfg_.enc_units);
      make_lstm_("enc.l" + std::to_string(k) + ".bwd", in, cfg_.enc_units);
    }
    make_mat_("att.W", cfg_.att_dim, cfg_.dec_units + u2 + 1);
    make_vec_("att.v", cfg_.att_dim);
    make_vec_("att.v_beta", u2);
    make_lstm_("dec", cfg_.dec_units + u2, cfg_.dec_units);
    make_mat_("embed", cfg_.vocab, cfg_.dec_units);
    make_mat_("readout.w1", 2 * cfg_.dec_units, cfg_.dec_units + cfg_.dec_units + u2);
    add_("readout.b1", Tensor::zeros({2 * cfg_.dec_units}));
    make_mat_("readout.w2", cfg_.vocab, cfg_.dec_units);
    add_("readout.b2", Tensor::zeros({cfg_.vocab}));
    make_mat_("ctc.w", cfg_.vocab, u2);
    add_("ctc.b", Tensor::zeros({cfg_.vocab}));
  }
};

// Copy every shared parameter into a model with more (or re-pooled) layers;
// parameters that only exist in the target keep their fresh initialization.
inline Model grow_encoder(const Model& old, size_t new_layers, std::vector<size_t> new_pooling) {
  if (new_layers < old.config().enc_layers)
    throw DimError("grow_encoder: encoder may only keep or gain layers");
  ModelConfig cfg = old.config();
  cfg.enc_layers = new_layers;
  cfg.pooling = std::move(new_pooling);
  Model grown(cfg);
  for (const auto& [name, t] : old.params()) {
    Tensor& dst = grown.p(name);
    if (dst.shape() != t.shape()) throw DimError("grow_encoder: shape changed for " + name);
    dst.value() = t.value();
  }
  return grown;
}

// ---------------------------------------------------------------------------
// checkpoints

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig cfg;
  std::map<std::string, Tensor> tensors;
};

// Round every stored value to 32-bit float precision in place, so that the
// live state matches what a reader of the next checkpoint will see.
inline void commit_f32(Tensor& t) {
  for (real& v : t.value()) v = static_cast<real>(static_cast<float>(v));
}

// The checkpoint container is shared by every trainable artifact (the
// recognizer and the LSTM language model); the config payload is an opaque
// canonical text whose schema identifies the owner.
struct RawCheckpoint {
  std::string config;
  std::map<std::string, Tensor> tensors;
};

inline void save_checkpoint_raw(const std::string& path, const std::string& ctext,
                                const std::map<std::string, Tensor>& tensors) {
  std::string out;
  out.append("ATTNASR1", 8);
  bin::put_u32(out, kCheckpointVersion);
  bin::put_u32(out, static_cast<uint32_t>(ctext.size()));
  out += ctext;
  bin::put_u32(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw FormatError("checkpoint: tensor name too long");
    if (t.rank() > 0xff) throw FormatError("checkpoint: tensor rank too large");
    bin::put_u16(out, static_cast<uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (size_t e : t.shape()) bin::put_u32(out, static_cast<uint32_t>(e));
    for (real v : t.value()) bin::put_f32(out, static_cast<float>(v));
  }
  write_file(path, out);
}

inline RawCheckpoint load_checkpoint_raw(const std::string& path) {
  std::string data = read_file(path);
  bin::Reader r(data, "checkpoint " + path);
  if (r.bytes(8) != "ATTNASR1") throw FormatError("checkpoint: bad magic in " + path);
  uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  RawCheckpoint ck;
  ck.config = r.bytes(r.u32());
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u16());
    size_t rank = r.u8();
    std::vector<size_t> shape(rank);
    for (size_t d = 0; d < rank; ++d) shape[d] = r.u32();
    Tensor t = Tensor::zeros(shape);
    for (real& v : t.value()) v = static_cast<real>(r.f32());
    if (ck.tensors.count(name)) throw FormatError("checkpoint: duplicate tensor " + name);
    ck.tensors[name] = std::move(t);
  }
  if (!r.eof()) throw FormatError("checkpoint: trailing bytes in " + path);
  return ck;
}

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const std::map<std::string, Tensor>& tensors) {
  save_checkpoint_raw(path, cfg.canonical(), tensors);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  RawCheckpoint raw = load_checkpoint_raw(path);
  return {ModelConfig::parse(raw.config), std::move(raw.tensors)};
}

inline Model model_from_checkpoint(const Checkpoint& ck) {
  Model m(ck.cfg);
  for (const auto& [name, t] : m.params()) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw FormatError("checkpoint: missing tensor " + name);
    if (it->second.shape() != t.shape()) throw FormatError("checkpoint: shape mismatch for " + name);
    m.p(name).value() = it->second.value();
  }
  return m;
}

inline void save_model(const std::string& path, const Model& m) {
  save_checkpoint(path, m.config(), m.params());
}

inline Model load_model(const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); }

}  // namespace attnlab
