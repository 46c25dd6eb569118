#pragma once

// Subword language models scoring the same BPE ids as the recognizer: an
// interpolated Kneser-Ney n-gram model with one absolute discount per order
// (d = n1/(n1+2*n2) from the count-of-counts of the table actually used at
// that level, continuation counts below the top), and a small LSTM model
// trained with plain SGD and global-norm clipping.  Both expose a stepwise
// scorer so shallow fusion uses one code path and stays bit-consistent with
// whole-sequence scoring.  Sequences are wrapped with BOS as context only
// and EOS as a predicted event.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attnlab/bpe.hpp"
#include "attnlab/io.hpp"
#include "attnlab/model.hpp"
#include "attnlab/tensor.hpp"
#include "attnlab/trainer.hpp"

namespace attnlab {

// ---------------------------------------------------------------------------
// Kneser-Ney n-gram model

// Stored in evaluated form (log10 conditional probabilities plus log10
// backoff weights per context), which round-trips losslessly through the
// ARPA-style text format.  Interpolation mass is already folded into every
// stored probability, so evaluation is plain longest-match with backoff.
struct NGramLM {
  size_t order = 0;
  int bos_id = kBosId;
  int eos_id = kEosId;
  std::vector<int> event_vocab;  // sorted ids the model can emit (incl. EOS)
  // probs[k]: context of length k -> word -> log10 p(word | context)
  std::vector<std::map<std::vector<int>, std::map<int, real>>> probs;
  std::map<std::vector<int>, real> backoff;  // log10 gamma per context
  std::vector<real> discounts;  // per level, informational (not serialized)

  // Longest-suffix lookup; unseen words under a seen context descend with
  // that context's backoff weight, unseen contexts pass through unweighted.
  real logprob10(const std::vector<int>& ctx, int w) const {
    real bo = 0.0;
    size_t kmax = std::min(order - 1, ctx.size());
    for (size_t k = kmax + 1; k-- > 0;) {
      std::vector<int> u(ctx.end() - static_cast<std::ptrdiff_t>(k), ctx.end());
      auto ci = probs[k].find(u);
      if (ci != probs[k].end()) {
        auto wi = ci->second.find(w);
        if (wi != ci->second.end()) return bo + wi->second;
      }
      if (k > 0) {
        auto bi = backoff.find(u);
        if (bi != backoff.end()) bo += bi->second;
      }
    }
    return bo - 99.0;  // id outside the event vocabulary
  }
};

namespace detail {

inline real clamp10(real p) { return p > 0.0 ? std::max(std::log10(p), -99.0) : -99.0; }

// Single absolute discount from the count-of-counts of one table.
inline real kn_discount(const std::map<std::vector<int>, std::map<int, uint64_t>>& table) {
  uint64_t n1 = 0, n2 = 0;
  for (const auto& [u, words] : table)
    for (const auto& [w, c] : words) {
      if (c == 1) ++n1;
      if (c == 2) ++n2;
    }
  return n1 + 2 * n2 > 0 ? static_cast<real>(n1) / static_cast<real>(n1 + 2 * n2) : 0.0;
}

}  // namespace detail

inline NGramLM train_kn(const std::vector<std::vector<int>>& corpus, size_t order,
                        std::vector<int> event_vocab = {}, int bos_id = kBosId,
                        int eos_id = kEosId) {
  if (order == 0) throw DimError("train_kn: order must be at least 1");
  if (corpus.empty()) throw DimError("train_kn: empty corpus");

  std::set<int> seen;
  for (const auto& seq : corpus)
    for (int id : seq) {
      if (id == bos_id || id == eos_id)
        throw FormatError("train_kn: corpus must not contain BOS or EOS ids");
      seen.insert(id);
    }
  seen.insert(eos_id);
  if (event_vocab.empty()) event_vocab.assign(seen.begin(), seen.end());
  std::sort(event_vocab.begin(), event_vocab.end());
  event_vocab.erase(std::unique(event_vocab.begin(), event_vocab.end()), event_vocab.end());
  for (int id : seen)
    if (!std::binary_search(event_vocab.begin(), event_vocab.end(), id))
      throw FormatError("train_kn: corpus id " + std::to_string(id) + " missing from vocabulary");
  if (std::binary_search(event_vocab.begin(), event_vocab.end(), bos_id))
    throw FormatError("train_kn: BOS cannot be an event");

  // Raw k-gram counts for every order, over BOS-padded streams with EOS as
  // the final event.
  using Table = std::map<std::vector<int>, std::map<int, uint64_t>>;
  std::vector<Table> raw(order);
  for (const auto& seq : corpus) {
    std::vector<int> stream(order - 1, bos_id);
    stream.insert(stream.end(), seq.begin(), seq.end());
    stream.push_back(eos_id);
    for (size_t i = order - 1; i < stream.size(); ++i)
      for (size_t k = 1; k <= order; ++k) {
        std::vector<int> u(stream.begin() + static_cast<std::ptrdiff_t>(i - k + 1),
                           stream.begin() + static_cast<std::ptrdiff_t>(i));
        raw[k - 1][u][stream[i]] += 1;
      }
  }

  // The top level keeps raw counts; level k below counts distinct one-token
  // extensions of each (k+1)-gram type (continuation counts).
  std::vector<Table> table(order);
  table[order - 1] = raw[order - 1];
  for (size_t k = order - 1; k-- > 0;)
    for (const auto& [u, words] : raw[k + 1])
      for (const auto& [w, c] : words) {
        std::vector<int> shorter(u.begin() + 1, u.end());
        table[k][shorter][w] += 1;
      }

  NGramLM lm;
  lm.order = order;
  lm.bos_id = bos_id;
  lm.eos_id = eos_id;
  lm.event_vocab = event_vocab;
  lm.probs.resize(order);
  real v_ev = static_cast<real>(event_vocab.size());

  for (size_t k = 0; k < order; ++k) {
    real d = detail::kn_discount(table[k]);
    lm.discounts.push_back(d);
    for (const auto& [u, words] : table[k]) {
      real tot = 0.0;
      for (const auto& [w, c] : words) tot += static_cast<real>(c);
      real gamma = d * static_cast<real>(words.size()) / tot;
      if (k == 0) {
        // Unigram level: interpolate with the uniform base and list every
        // event id so any query has an explicit floor.
        for (int w : event_vocab) {
          auto wi = words.find(w);
          real c = wi == words.end() ? 0.0 : static_cast<real>(wi->second);
          real p = std::max(c - d, 0.0) / tot + gamma / v_ev;
          lm.probs[0][u][w] = detail::clamp10(p);
        }
      } else {
        std::vector<int> shorter(u.begin() + 1, u.end());
        for (const auto& [w, c] : words) {
          real p = std::max(static_cast<real>(c) - d, 0.0) / tot +
                   gamma * std::pow(10.0, lm.logprob10(shorter, w));
          lm.probs[k][u][w] = detail::clamp10(p);
        }
        lm.backoff[u] = detail::clamp10(gamma);
      }
    }
  }
  if (lm.probs[0].empty())
    for (int w : event_vocab) lm.probs[0][{}][w] = detail::clamp10(1.0 / v_ev);
  return lm;
}

// Accumulated step by step in the natural-log domain, the same arithmetic
// the stepwise scorer uses, so whole-sequence and incremental scores agree
// exactly.
inline real lm_logprob(const NGramLM& lm, const std::vector<int>& tokens) {
  std::vector<int> ctx(lm.order - 1, lm.bos_id);
  real total = 0.0;
  auto feed = [&](int tok) {
    total += lm.logprob10(ctx, tok) * M_LN10;
    if (lm.order > 1) {
      ctx.push_back(tok);
      ctx.erase(ctx.begin());
    }
  };
  for (int tok : tokens) feed(tok);
  feed(lm.eos_id);
  return total;
}

// ---------------------------------------------------------------------------
// ARPA-style text serialization (log10 probabilities, decimal token ids)

inline std::string write_arpa(const NGramLM& lm) {
  // Line set per level: every stored k-gram plus every backoff context of
  // that length; context-only grams (pure-BOS prefixes) get probability -99.
  std::vector<std::map<std::vector<int>, real>> lines(lm.order);
  for (size_t k = 0; k < lm.order; ++k)
    for (const auto& [u, words] : lm.probs[k])
      for (const auto& [w, p] : words) {
        std::vector<int> ids = u;
        ids.push_back(w);
        lines[k][ids] = p;
      }
  for (const auto& [u, g] : lm.backoff)
    if (!lines[u.size() - 1].count(u)) lines[u.size() - 1][u] = -99.0;

  std::ostringstream o;
  o << "\\data\\\n";
  for (size_t k = 0; k < lm.order; ++k) o << "ngram " << k + 1 << "=" << lines[k].size() << "\n";
  for (size_t k = 0; k < lm.order; ++k) {
    o << "\n\\" << k + 1 << "-grams:\n";
    for (const auto& [ids, p] : lines[k]) {
      o << format_real(p) << "\t";
      for (size_t i = 0; i < ids.size(); ++i) o << (i ? " " : "") << ids[i];
      if (k + 1 < lm.order) {
        auto bi = lm.backoff.find(ids);
        o << "\t" << format_real(bi == lm.backoff.end() ? 0.0 : bi->second);
      }
      o << "\n";
    }
  }
  o << "\n\\end\\\n";
  return o.str();
}

inline NGramLM read_arpa(const std::string& text, int bos_id = kBosId, int eos_id = kEosId) {
  std::istringstream in(text);
  std::string line;
  auto next_line = [&]() {
    if (!std::getline(in, line)) throw FormatError("arpa: unexpected end of input");
    return line;
  };
  while (next_line().empty()) {
  }
  if (line != "\\data\\") throw FormatError("arpa: expected \\data\\ header");

  std::vector<size_t> counts;
  while (!next_line().empty()) {
    std::istringstream ls(line);
    std::string word;
    size_t k = 0, n = 0;
    char eq = 0;
    ls >> word >> k >> eq >> n;
    if (word != "ngram" || eq != '=' || k != counts.size() + 1 || ls.fail())
      throw FormatError("arpa: bad count line \"" + line + "\"");
    counts.push_back(n);
  }
  if (counts.empty()) throw FormatError("arpa: no ngram counts");

  NGramLM lm;
  lm.order = counts.size();
  lm.bos_id = bos_id;
  lm.eos_id = eos_id;
  lm.probs.resize(lm.order);
  for (size_t k = 0; k < lm.order; ++k) {
    if (next_line() != "\\" + std::to_string(k + 1) + "-grams:")
      throw FormatError("arpa: expected \\" + std::to_string(k + 1) + "-grams: section");
    for (size_t i = 0; i < counts[k]; ++i) {
      next_line();
      std::vector<std::string> fields;
      size_t start = 0;
      while (true) {
        size_t tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
      }
      size_t expect = k + 1 < lm.order ? 3 : 2;
      if (fields.size() != expect) throw FormatError("arpa: bad line \"" + line + "\"");
      std::vector<int> ids;
      std::istringstream ts(fields[1]);
      int id = 0;
      while (ts >> id) ids.push_back(id);
      if (ids.size() != k + 1) throw FormatError("arpa: wrong gram length in \"" + line + "\"");
      try {
        std::vector<int> u(ids.begin(), ids.end() - 1);
        lm.probs[k][u][ids.back()] = std::stod(fields[0]);
        if (fields.size() == 3) lm.backoff[ids] = std::stod(fields[2]);
      } catch (const std::exception&) {
        throw FormatError("arpa: bad number in \"" + line + "\"");
      }
    }
    if (!next_line().empty()) throw FormatError("arpa: expected blank line after section");
  }
  if (next_line() != "\\end\\") throw FormatError("arpa: expected \\end\\ footer");
  while (std::getline(in, line))
    if (!line.empty()) throw FormatError("arpa: trailing content after \\end\\");
  for (const auto& [w, p] : lm.probs[0][{}])
    if (w != bos_id) lm.event_vocab.push_back(w);
  return lm;
}

// ---------------------------------------------------------------------------
// LSTM language model

struct LstmLmConfig {
  size_t vocab = 0;
  size_t embed = 32;
  size_t layers = 1;
  size_t units = 128;
  real dropout = 0.2;
  uint64_t seed = 0;

  std::string canonical() const {
    std::ostringstream o;
    o << "dropout=" << format_real(dropout) << "\n";
    o << "embed=" << embed << "\n";
    o << "layers=" << layers << "\n";
    o << "lm=lstm\n";
    o << "seed=" << seed << "\n";
    o << "units=" << units << "\n";
    o << "vocab=" << vocab << "\n";
    return o.str();
  }

  static LstmLmConfig parse(const std::string& text) {
    LstmLmConfig c;
    std::map<std::string, bool> seen;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      size_t eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("lm config: missing '=' in \"" + line + "\"");
      std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      if (seen[key]) throw FormatError("lm config: duplicate key " + key);
      seen[key] = true;
      try {
        if (key == "dropout") c.dropout = std::stod(val);
        else if (key == "embed") c.embed = std::stoull(val);
        else if (key == "layers") c.layers = std::stoull(val);
        else if (key == "seed") c.seed = std::stoull(val);
        else if (key == "units") c.units = std::stoull(val);
        else if (key == "vocab") c.vocab = std::stoull(val);
        else if (key == "lm") {
          if (val != "lstm") throw FormatError("lm config: unsupported kind " + val);
        } else {
          throw FormatError("lm config: unknown key " + key);
        }
      } catch (const std::invalid_argument&) {
        throw FormatError("lm config: bad value for " + key + ": " + val);
      } catch (const std::out_of_range&) {
        throw FormatError("lm config: bad value for " + key + ": " + val);
      }
    }
    const char* required[] = {"dropout", "embed", "layers", "lm", "seed", "units", "vocab"};
    for (const char* k : required)
      if (!seen[k]) throw FormatError(std::string("lm config: missing key ") + k);
    return c;
  }
};

// Shape used by the original large-scale recipe.
inline LstmLmConfig large_lm_config(size_t vocab) {
  LstmLmConfig c;
  c.vocab = vocab;
  c.embed = 512;
  c.layers = 2;
  c.units = 2048;
  return c;
}

class LstmLM {
 public:
  struct State {
    std::vector<Tensor> h, c;
  };

  explicit LstmLM(LstmLmConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.vocab < 2) throw DimError("lstm lm: vocabulary too small");
    if (cfg_.layers == 0 || cfg_.units == 0 || cfg_.embed == 0)
      throw DimError("lstm lm: zero-sized layer");
    make_mat_("embed", cfg_.vocab, cfg_.embed);
    for (size_t k = 0; k < cfg_.layers; ++k)
      make_lstm_("l" + std::to_string(k), k == 0 ? cfg_.embed : cfg_.units, cfg_.units);
    make_mat_("out.w", cfg_.vocab, cfg_.units);
    add_("out.b", Tensor::zeros({cfg_.vocab}));
  }

  const LstmLmConfig& config() const { return cfg_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  Tensor p(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw DimError("lstm lm: unknown parameter " + name);
    return it->second;
  }
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& [n, t] : params_) out.push_back(t);
    return out;
  }

  State init_state() const {
    State st;
    for (size_t k = 0; k < cfg_.layers; ++k) {
      st.h.push_back(Tensor::zeros({cfg_.units}));
      st.c.push_back(Tensor::zeros({cfg_.units}));
    }
    return st;
  }

  // Advance the hidden state over one consumed token; dropout applies to
  // the input of every LSTM layer while training.
  void consume(Tape& t, State& st, int token, bool train = false, Rng* rng = nullptr) const {
    if (token < 0 || static_cast<size_t>(token) >= cfg_.vocab)
      throw DimError("lstm lm: token id out of range");
    Tensor x = row(t, p("embed"), static_cast<size_t>(token));
    for (size_t k = 0; k < cfg_.layers; ++k) {
      Tensor in = train && cfg_.dropout > 0.0 ? dropout(t, x, cfg_.dropout, *rng) : x;
      LstmWeights w{p("l" + std::to_string(k) + ".w"), p("l" + std::to_string(k) + ".b")};
      LstmOut o = lstm_step(t, in, st.h[k], st.c[k], w);
      st.h[k] = o.h;
      st.c[k] = o.c;
      x = o.h;
    }
  }

  // Natural-log distribution over the next token given the consumed prefix.
  Tensor predict(Tape& t, const State& st) const {
    Tensor logits = add(t, matvec(t, p("out.w"), st.h.back()), p("out.b"));
    return log(t, softmax(t, logits));
  }

 private:
  LstmLmConfig cfg_;
  std::map<std::string, Tensor> params_;

  static uint64_t name_hash_(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }
  void add_(const std::string& name, Tensor t) {
    t.set_requires_grad();
    params_[name] = std::move(t);
  }
  void make_mat_(const std::string& name, size_t r, size_t c) {
    Rng rng = Rng::derive(cfg_.seed, name_hash_(name));
    add_(name, Tensor::glorot(r, c, rng));
  }
  void make_lstm_(const std::string& prefix, size_t input_dim, size_t units) {
    Rng rng = Rng::derive(cfg_.seed, name_hash_(prefix));
    LstmWeights lw = LstmWeights::init(input_dim, units, rng);
    add_(prefix + ".w", lw.w);
    add_(prefix + ".b", lw.b);
  }
};

inline real lm_logprob(const LstmLM& lm, const std::vector<int>& tokens) {
  Tape t(false);
  LstmLM::State st = lm.init_state();
  lm.consume(t, st, kBosId);
  real total = 0.0;
  for (size_t i = 0; i <= tokens.size(); ++i) {
    int tok = i < tokens.size() ? tokens[i] : kEosId;
    Tensor lp = lm.predict(t, st);
    total += lp.at(static_cast<size_t>(tok));
    lm.consume(t, st, tok);
  }
  return total;
}

template <typename M>
inline real perplexity(const M& lm, const std::vector<std::vector<int>>& corpus) {
  if (corpus.empty()) throw DimError("perplexity: empty corpus");
  real total = 0.0;
  size_t events = 0;
  for (const auto& seq : corpus) {
    total += lm_logprob(lm, seq);
    events += seq.size() + 1;
  }
  return std::exp(-total / static_cast<real>(events));
}

// ---------------------------------------------------------------------------
// LSTM LM training: plain SGD with global-norm clipping

struct LstmLmTrainConfig {
  size_t epochs = 10;
  real lr = 1.0;
  real clip = 5.0;
  uint64_t seed = 0;
};

inline void sgd_step(const std::vector<Tensor>& params, real lr) {
  for (const Tensor& pt : params) {
    Tensor p = pt;
    if (!p.requires_grad()) continue;
    const std::vector<real>& g = p.grad();
    for (size_t i = 0; i < p.numel(); ++i) p.value()[i] -= lr * g[i];
  }
}

inline LstmLM train_lstm_lm(const std::vector<std::vector<int>>& corpus, const LstmLmConfig& cfg,
                            const LstmLmTrainConfig& tr = {}, std::ostream* metrics = nullptr) {
  if (corpus.empty()) throw DimError("train_lstm_lm: empty corpus");
  LstmLM lm(cfg);
  std::vector<Tensor> plist = lm.parameters();
  for (size_t epoch = 1; epoch <= tr.epochs; ++epoch) {
    Rng shuffle_rng = Rng::derive(tr.seed, 0x7A6E, epoch);
    Rng drop_rng = Rng::derive(tr.seed, 0xD407, epoch);
    std::vector<size_t> idx(corpus.size());
    std::iota(idx.begin(), idx.end(), 0);
    shuffle_rng.shuffle(idx);
    real ce_total = 0.0;
    size_t events = 0;
    for (size_t i : idx) {
      const std::vector<int>& seq = corpus[i];
      for (Tensor& p : plist) p.zero_grad();
      Tape tape;
      LstmLM::State st = lm.init_state();
      lm.consume(tape, st, kBosId, true, &drop_rng);
      std::vector<Tensor> picks;
      for (size_t j = 0; j <= seq.size(); ++j) {
        int tok = j < seq.size() ? seq[j] : kEosId;
        picks.push_back(slice(tape, lm.predict(tape, st), static_cast<size_t>(tok), 1));
        lm.consume(tape, st, tok, true, &drop_rng);
      }
      Tensor loss = scale(tape, sum(tape, concat(tape, picks)),
                          -1.0 / static_cast<real>(picks.size()));
      tape.backward(loss);
      clip_global_norm(plist, tr.clip);
      sgd_step(plist, tr.lr);
      ce_total += loss.item() * static_cast<real>(picks.size());
      events += picks.size();
    }
    if (metrics)
      *metrics << epoch << '\t' << format_real(ce_total / static_cast<real>(events)) << '\n';
  }
  return lm;
}

inline void save_lstm_lm(const std::string& path, const LstmLM& lm) {
  save_checkpoint_raw(path, lm.config().canonical(), lm.params());
}

inline LstmLM load_lstm_lm(const std::string& path) {
  RawCheckpoint raw = load_checkpoint_raw(path);
  LstmLM lm(LstmLmConfig::parse(raw.config));
  for (const auto& [name, t] : lm.params()) {
    auto it = raw.tensors.find(name);
    if (it == raw.tensors.end()) throw FormatError("lm checkpoint: missing tensor " + name);
    if (it->second.shape() != t.shape())
      throw FormatError("lm checkpoint: shape mismatch for " + name);
    lm.p(name).value() = it->second.value();
  }
  return lm;
}

// ---------------------------------------------------------------------------
// Unified stepwise scorer for shallow fusion

struct LmState {
  std::vector<int> context;  // n-gram context, newest last
  LstmLM::State rnn;
};

// One interface over "no LM", n-gram and LSTM models.  start() returns the
// state after consuming BOS; logprobs() gives the natural-log distribution
// for the next token; advance() consumes one token.
class LmScorer {
 public:
  LmScorer() : vocab_(0) {}
  LmScorer(const NGramLM* lm, size_t vocab) : ngram_(lm), vocab_(vocab) {}
  explicit LmScorer(const LstmLM* lm) : lstm_(lm), vocab_(lm->config().vocab) {}

  bool active() const { return ngram_ || lstm_; }
  size_t vocab() const { return vocab_; }

  LmState start() const {
    LmState st;
    if (ngram_ && ngram_->order > 1)
      st.context.assign(ngram_->order - 1, ngram_->bos_id);
    if (lstm_) {
      st.rnn = lstm_->init_state();
      Tape t(false);
      lstm_->consume(t, st.rnn, kBosId);
    }
    return st;
  }

  std::vector<real> logprobs(const LmState& st) const {
    std::vector<real> out(vocab_, 0.0);
    if (ngram_)
      for (size_t w = 0; w < vocab_; ++w)
        out[w] = ngram_->logprob10(st.context, static_cast<int>(w)) * M_LN10;
    if (lstm_) {
      Tape t(false);
      out = lstm_->predict(t, st.rnn).value();
    }
    return out;
  }

  LmState advance(LmState st, int token) const {
    if (ngram_ && ngram_->order > 1) {
      st.context.push_back(token);
      st.context.erase(st.context.begin());
    }
    if (lstm_) {
      Tape t(false);
      lstm_->consume(t, st.rnn, token);
    }
    return st;
  }

 private:
  const NGramLM* ngram_ = nullptr;
  const LstmLM* lstm_ = nullptr;
  size_t vocab_;
};

}  // namespace attnlab
