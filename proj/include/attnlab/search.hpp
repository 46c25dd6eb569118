#pragma once

// Beam-search decoding over subword units with shallow LM fusion, sequence
// scoring, word error rate, LM-weight grid search, and search-error analysis.
// The decoder is a template parameter: anything shaped like Model (encode /
// init_state / decoder_step) works, including table-driven toy decoders.

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "attnlab/bpe.hpp"
#include "attnlab/data.hpp"
#include "attnlab/lm.hpp"
#include "attnlab/model.hpp"

namespace attnlab {

struct FusionConfig {
  real lambda = 0.0;  // LM weight, >= 0
  LmScorer lm;        // inactive by default
};

// One search hypothesis. Scores are natural-log probabilities accumulated
// from the start of the utterance; EOS terms are included once finished.
// The fused score is always recomputed from the components so the
// decomposition is exact.
struct Hypothesis {
  std::vector<int> tokens;  // emitted ids after BOS; EOS is not stored
  real am = 0.0;            // attention-model log score
  real lm = 0.0;            // language-model log score
  DecState state;           // decoder state that produced the last distribution
  bool finished = false;    // EOS emitted
  bool forced = false;      // hit the length cap without EOS

  real fused(real lambda) const { return am + lambda * lm; }
};

namespace detail {

constexpr real kLogZero = -1e30;

inline real safe_log(real p) { return p > 0.0 ? std::log(p) : kLogZero; }

// finished-set order: fused score descending, then shorter, then lexicographic
inline bool better_hyp(const Hypothesis& a, const Hypothesis& b, real lambda) {
  real fa = a.fused(lambda), fb = b.fused(lambda);
  if (fa != fb) return fa > fb;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

}  // namespace detail

// Breadth-first beam search. Every active hypothesis is expanded over the
// full vocabulary each step and extensions compete by fused score
// am + lambda*lm; ties prefer the lower emitted token id, then the
// lexicographically smaller prefix. Extensions that emit EOS move to the
// finished set with the EOS scores included. The search stops once the
// finished set holds beam_size entries whose worst fused score is at least
// the best active score, or after max_len steps (default: encoded length
// plus 10). Results are the finished set, best first, without length
// normalization. If nothing finished in time, the best active hypothesis is
// returned alone with the `forced` flag set.
template <class M>
std::vector<Hypothesis> beam_search(const M& model, const Tensor& feats, size_t beam_size = 12,
                                    const FusionConfig& fusion = {}, size_t max_len = 0) {
  if (beam_size == 0) throw DimError("beam_search: beam size must be at least 1");
  if (fusion.lambda < 0) throw DimError("beam_search: lm weight must be nonnegative");
  if (!feats.defined() || feats.numel() == 0) throw DimError("beam_search: empty features");

  Tape t(false);
  Tensor enc_h = model.encode(t, feats);
  if (max_len == 0) max_len = enc_h.rows() + 10;
  const real lambda = fusion.lambda;
  const bool use_lm = fusion.lm.active();

  struct Item {
    Hypothesis hyp;
    LmState lm;
  };
  std::vector<Item> active(1);
  active[0].hyp.state = model.init_state(enc_h.rows());
  if (use_lm) active[0].lm = fusion.lm.start();

  std::vector<Hypothesis> finished;
  struct Cand {
    size_t parent;
    int tok;
    real am, lm, fused;
  };
  std::vector<Cand> cands;

  for (size_t step = 0; step < max_len && !active.empty(); ++step) {
    // finished is kept sorted; active is in selection order, best first
    if (finished.size() >= beam_size &&
        finished.back().fused(lambda) >= active.front().hyp.fused(lambda))
      break;

    cands.clear();
    std::vector<DecState> states(active.size());
    for (size_t i = 0; i < active.size(); ++i) {
      const Item& it = active[i];
      int prev = it.hyp.tokens.empty() ? kBosId : it.hyp.tokens.back();
      auto so = model.decoder_step(t, enc_h, it.hyp.state, prev);
      const std::vector<real>& p = so.dist.value();
      std::vector<real> lp_lm;
      if (use_lm) {
        lp_lm = fusion.lm.logprobs(it.lm);
        if (lp_lm.size() < p.size())
          throw DimError("beam_search: lm vocabulary smaller than decoder vocabulary");
      }
      for (size_t w = 0; w < p.size(); ++w) {
        Cand c;
        c.parent = i;
        c.tok = static_cast<int>(w);
        c.am = it.hyp.am + detail::safe_log(p[w]);
        c.lm = it.hyp.lm + (use_lm ? lp_lm[w] : 0.0);
        c.fused = c.am + lambda * c.lm;
        cands.push_back(c);
      }
      states[i] = std::move(so.state);
    }

    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      if (a.fused != b.fused) return a.fused > b.fused;
      if (a.tok != b.tok) return a.tok < b.tok;
      return active[a.parent].hyp.tokens < active[b.parent].hyp.tokens;
    });
    if (cands.size() > beam_size) cands.resize(beam_size);

    std::vector<Item> next;
    next.reserve(cands.size());
    for (const Cand& c : cands) {
      const Item& par = active[c.parent];
      if (c.tok == kEosId) {
        Hypothesis h;
        h.tokens = par.hyp.tokens;
        h.am = c.am;
        h.lm = c.lm;
        h.state = states[c.parent];
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        Item it;
        it.hyp.tokens = par.hyp.tokens;
        it.hyp.tokens.push_back(c.tok);
        it.hyp.am = c.am;
        it.hyp.lm = c.lm;
        it.hyp.state = states[c.parent];
        if (use_lm) it.lm = fusion.lm.advance(par.lm, c.tok);
        next.push_back(std::move(it));
      }
    }
    std::sort(finished.begin(), finished.end(),
              [&](const Hypothesis& a, const Hypothesis& b) { return detail::better_hyp(a, b, lambda); });
    if (finished.size() > beam_size) finished.resize(beam_size);
    active = std::move(next);
  }

  if (finished.empty()) {
    // active cannot also be empty: hypotheses only leave it by finishing
    Hypothesis h = active.front().hyp;
    h.forced = true;
    return {h};
  }
  return finished;
}

// Teacher-forced scoring of exactly `tokens` plus EOS, with the same
// arithmetic and in the same order as beam_search, so the result is
// bit-identical to the score a beam hypothesis with these tokens reports.
template <class M>
Hypothesis score_sequence(const M& model, const Tensor& feats, const std::vector<int>& tokens,
                          const FusionConfig& fusion = {}) {
  if (fusion.lambda < 0) throw DimError("score_sequence: lm weight must be nonnegative");
  if (!feats.defined() || feats.numel() == 0) throw DimError("score_sequence: empty features");

  Tape t(false);
  Tensor enc_h = model.encode(t, feats);
  const bool use_lm = fusion.lm.active();

  Hypothesis h;
  h.state = model.init_state(enc_h.rows());
  LmState lst;
  if (use_lm) lst = fusion.lm.start();

  int prev = kBosId;
  std::vector<int> targets = tokens;
  targets.push_back(kEosId);
  for (int tok : targets) {
    auto so = model.decoder_step(t, enc_h, h.state, prev);
    const std::vector<real>& p = so.dist.value();
    if (tok < 0 || static_cast<size_t>(tok) >= p.size())
      throw DimError("score_sequence: token id out of range");
    h.am += detail::safe_log(p[static_cast<size_t>(tok)]);
    if (use_lm) {
      std::vector<real> lp = fusion.lm.logprobs(lst);
      if (lp.size() < p.size())
        throw DimError("score_sequence: lm vocabulary smaller than decoder vocabulary");
      h.lm += lp[static_cast<size_t>(tok)];
      if (tok != kEosId) lst = fusion.lm.advance(lst, tok);
    }
    h.state = so.state;
    prev = tok;
  }
  h.tokens = tokens;
  h.finished = true;
  return h;
}

// ---------------------------------------------------------------------------
// Word error rate

inline size_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= b.size(); ++j) {
      size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// (substitutions + deletions + insertions) / reference length, uniform cost
inline real wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  return static_cast<real>(edit_distance(ref, hyp)) /
         static_cast<real>(std::max<size_t>(ref.size(), 1));
}

// ---------------------------------------------------------------------------
// Search-error analysis and LM-weight tuning

struct SearchErrorReport {
  size_t utterances = 0;
  size_t errors = 0;     // decoded fused score below the reference's
  real error_rate = 0.0;  // errors / utterances
  real wer = 0.0;         // corpus rate: total edits / total reference words
};

// Decode each utterance and compare the best fused score against the
// teacher-forced score of its reference tokens; a strictly lower decoded
// score is a search error. Writes one verdict line per utterance
// (id, verdict, decoded score, reference score, utterance WER) and a summary
// line "search_errors=<pct> wer=<pct>" when `out` is given.
template <class M>
SearchErrorReport search_error_analysis(const M& model, const std::vector<Utterance>& data,
                                        const BpeModel& bpe, size_t beam_size,
                                        const FusionConfig& fusion = {},
                                        std::ostream* out = nullptr) {
  if (data.empty()) throw DimError("search_error_analysis: empty dataset");
  SearchErrorReport rep;
  size_t edits = 0, ref_words = 0;
  for (const Utterance& u : data) {
    Tensor feats = u.feats.tensor();
    Hypothesis best = beam_search(model, feats, beam_size, fusion).front();
    Hypothesis ref = score_sequence(model, feats, u.tokens, fusion);
    real dec_score = best.fused(fusion.lambda);
    real ref_score = ref.fused(fusion.lambda);
    bool err = dec_score < ref_score;
    if (err) ++rep.errors;
    ++rep.utterances;
    std::vector<std::string> hyp_words = merge_to_words(bpe, best.tokens);
    edits += edit_distance(u.words, hyp_words);
    ref_words += u.words.size();
    if (out)
      *out << u.id << '\t' << (err ? "search_error" : "ok") << '\t' << format_real(dec_score)
           << '\t' << format_real(ref_score) << '\t' << format_real(wer(u.words, hyp_words))
           << "\n";
  }
  rep.error_rate = static_cast<real>(rep.errors) / static_cast<real>(rep.utterances);
  rep.wer = static_cast<real>(edits) / static_cast<real>(std::max<size_t>(ref_words, 1));
  if (out)
    *out << "search_errors=" << format_real(rep.error_rate * 100) << " wer="
         << format_real(rep.wer * 100) << "\n";
  return rep;
}

// Decode the dev set once per grid point and return the weight with the
// lowest corpus WER; ties go to the smaller weight. Writes one
// "lambda<TAB>wer" line per grid point when `out` is given.
template <class M>
real tune_lm_weight(const M& model, const std::vector<Utterance>& dev, const BpeModel& bpe,
                    const LmScorer& lm, std::vector<real> grid, size_t beam_size = 12,
                    std::ostream* out = nullptr) {
  if (dev.empty()) throw DimError("tune_lm_weight: empty dev set");
  if (grid.empty()) throw DimError("tune_lm_weight: empty grid");
  std::sort(grid.begin(), grid.end());
  real best_lambda = grid.front();
  real best_wer = std::numeric_limits<real>::infinity();
  for (real lambda : grid) {
    FusionConfig fusion{lambda, lm};
    size_t edits = 0, ref_words = 0;
    for (const Utterance& u : dev) {
      Hypothesis best = beam_search(model, u.feats.tensor(), beam_size, fusion).front();
      edits += edit_distance(u.words, merge_to_words(bpe, best.tokens));
      ref_words += u.words.size();
    }
    real w = static_cast<real>(edits) / static_cast<real>(std::max<size_t>(ref_words, 1));
    if (out) *out << format_real(lambda) << '\t' << format_real(w) << "\n";
    if (w < best_wer) {
      best_wer = w;
      best_lambda = lambda;
    }
  }
  return best_lambda;
}

}  // namespace attnlab
