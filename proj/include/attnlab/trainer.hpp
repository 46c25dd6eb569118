#pragma once

// Curriculum and optimization: the layer-growing pretraining schedule with
// its fixed total time reduction, Adam with bias correction, global-norm
// gradient clipping, warmup plus cross-validation-driven learning rate
// decay, and the epoch loop that ties model, losses and data together.
// Checkpoints carry the optimizer state, and all randomness is derived
// functionally from (seed, epoch), so a resumed run replays the original
// bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "attnlab/data.hpp"
#include "attnlab/losses.hpp"
#include "attnlab/model.hpp"

namespace attnlab {

// ---------------------------------------------------------------------------
// pretraining schedule

// One curriculum stage.  The pooling list holds the factor applied after
// each encoder layer except the last (the published ladder counts the gaps
// between layers); model_pooling() pads the missing trailing entry.
struct PretrainStage {
  size_t index = 0;
  size_t layers = 2;
  std::vector<size_t> pooling;
  bool label_smoothing = false;
  bool encoder_dropout = false;
  size_t epochs = 2;

  std::vector<size_t> model_pooling() const {
    std::vector<size_t> p = pooling;
    p.push_back(1);
    return p;
  }
  size_t reduction() const {
    size_t r = 1;
    for (size_t f : pooling) r *= f;
    return r;
  }
};

// Growth stage s has 2+s layers and pooling [32/2^s, 2, ..., 2] (s twos),
// keeping the product at 32; the final stage reaches final_red by halving
// factors from the back, which removes the last pooling ops first.  When
// final_red is 32 the last growth stage and the final stage coincide.
inline std::vector<PretrainStage> build_pretrain_schedule(size_t target_layers = 6,
                                                          size_t final_red = 8,
                                                          size_t stage_epochs = 2,
                                                          size_t final_epochs = 50) {
  if (target_layers < 2 || target_layers > 6)
    throw DimError("schedule: encoder depth must be between 2 and 6");
  if (final_red == 0 || (final_red & (final_red - 1)) != 0 || final_red > 32)
    throw DimError("schedule: final reduction must be a power of two no larger than 32");
  std::vector<PretrainStage> out;
  for (size_t s = 0; s + 2 <= target_layers; ++s) {
    PretrainStage st;
    st.index = s;
    st.layers = 2 + s;
    st.pooling.assign(1, static_cast<size_t>(32) >> s);
    st.pooling.insert(st.pooling.end(), s, 2);
    st.encoder_dropout = s >= 2;
    st.epochs = stage_epochs;
    out.push_back(std::move(st));
  }
  std::vector<size_t> fin = out.back().pooling;
  size_t prod = 32;
  while (prod > final_red) {
    size_t i = fin.size();
    while (i-- > 0)
      if (fin[i] > 1) break;
    fin[i] /= 2;
    prod /= 2;
  }
  if (fin == out.back().pooling) {
    out.back().label_smoothing = true;
    out.back().epochs = final_epochs;
  } else {
    PretrainStage st;
    st.index = out.size();
    st.layers = target_layers;
    st.pooling = std::move(fin);
    st.label_smoothing = true;
    st.encoder_dropout = st.index >= 2;
    st.epochs = final_epochs;
    out.push_back(std::move(st));
  }
  return out;
}

// Training without the curriculum: the final architecture from scratch.
inline std::vector<PretrainStage> direct_schedule(size_t target_layers, size_t final_red,
                                                  size_t epochs) {
  PretrainStage st = build_pretrain_schedule(target_layers, final_red, 1, epochs).back();
  st.index = 0;
  st.label_smoothing = true;
  st.encoder_dropout = true;
  st.epochs = epochs;
  return {st};
}

inline Model grow_to_stage(const Model& m, const std::vector<PretrainStage>& schedule,
                           size_t from_stage, size_t to_stage) {
  if (to_stage != from_stage + 1) throw DimError("grow_to_stage: stages must advance one at a time");
  if (to_stage >= schedule.size()) throw DimError("grow_to_stage: no such stage");
  const PretrainStage& from = schedule[from_stage];
  if (m.config().enc_layers != from.layers || m.config().pooling != from.model_pooling())
    throw DimError("grow_to_stage: model does not match the source stage");
  const PretrainStage& to = schedule[to_stage];
  return grow_encoder(m, to.layers, to.model_pooling());
}

// ---------------------------------------------------------------------------
// optimization primitives

struct OptimState {
  std::map<std::string, Tensor> m;  // first moments, by parameter name
  std::map<std::string, Tensor> v;  // second moments
  uint64_t step = 0;
  std::vector<real> cv_history;
};

// Bias-corrected Adam over the accumulated gradients; parameters without
// gradients so far move by exactly zero.
inline void adam_step(const std::map<std::string, Tensor>& params, OptimState& st, real lr,
                      real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8) {
  st.step += 1;
  real bc1 = 1.0 - std::pow(beta1, static_cast<real>(st.step));
  real bc2 = 1.0 - std::pow(beta2, static_cast<real>(st.step));
  for (const auto& [name, pt] : params) {
    Tensor p = pt;
    if (!p.requires_grad()) continue;
    Tensor& m = st.m[name];
    Tensor& v = st.v[name];
    if (!m.defined()) m = Tensor::zeros(p.shape());
    if (!v.defined()) v = Tensor::zeros(p.shape());
    if (m.shape() != p.shape() || v.shape() != p.shape())
      throw DimError("adam_step: moment shape does not match " + name);
    const std::vector<real>& g = p.grad();
    for (size_t i = 0; i < p.numel(); ++i) {
      m.at(i) = beta1 * m.at(i) + (1.0 - beta1) * g[i];
      v.at(i) = beta2 * v.at(i) + (1.0 - beta2) * g[i] * g[i];
      p.value()[i] -= lr * (m.at(i) / bc1) / (std::sqrt(v.at(i) / bc2) + eps);
    }
  }
}

// Returns the pre-clip global 2-norm over all gradients; rescales them in
// place when it exceeds max_norm.
inline real clip_global_norm(const std::vector<Tensor>& params, real max_norm) {
  real sq = 0.0;
  for (const Tensor& pt : params) {
    Tensor p = pt;
    if (!p.requires_grad()) continue;
    for (real g : p.grad()) sq += g * g;
  }
  real norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    real s = max_norm / norm;
    for (const Tensor& pt : params) {
      Tensor p = pt;
      if (!p.requires_grad()) continue;
      for (real& g : p.grad()) g *= s;
    }
  }
  return norm;
}

struct LrConfig {
  real base = 1e-3;
  size_t warmup_steps = 500;
  real newbob_threshold = 0.01;
  real newbob_decay = 0.7;
  real floor = 1e-6;
};

// Replay the cross-validation history: every epoch-over-epoch relative
// improvement below the threshold multiplies the rate by the decay.
inline real newbob_factor(const std::vector<real>& cv_history, real threshold, real decay) {
  real f = 1.0;
  for (size_t i = 1; i < cv_history.size(); ++i) {
    real prev = cv_history[i - 1];
    real rel = std::abs(prev) > 1e-12 ? (prev - cv_history[i]) / std::abs(prev) : 0.0;
    if (rel < threshold) f *= decay;
  }
  return f;
}

// Linear warmup from base/10 to base over warmup_steps, scaled by the
// Newbob factor and floored.
inline real lr_schedule(uint64_t step, const std::vector<real>& cv_history, const LrConfig& c) {
  real warm = c.warmup_steps == 0
                  ? 1.0
                  : std::min(1.0, 0.1 + 0.9 * static_cast<real>(step) /
                                            static_cast<real>(c.warmup_steps));
  real lr = c.base * warm * newbob_factor(cv_history, c.newbob_threshold, c.newbob_decay);
  return std::max(lr, c.floor);
}

// ---------------------------------------------------------------------------
// training loop

struct TrainConfig {
  size_t epochs = 50;  // final stage / direct training
  size_t stage_epochs = 2;
  bool pretrain = true;
  size_t target_layers = 6;
  size_t final_reduction = 8;
  size_t batch_frames = 4000;
  real clip_norm = 5.0;
  LrConfig lr;
  LossConfig loss;
  uint64_t seed = 0;
};

struct EpochStats {
  size_t epoch = 0;  // global, 1-based
  size_t stage = 0;
  real train_loss = 0;
  real cv_loss = 0;
  real lr = 0;
  size_t ctc_skipped = 0;
};

struct TrainOptions {
  std::string out_dir;              // empty: keep no checkpoints
  std::ostream* metrics = nullptr;  // one tab-separated line per epoch
  std::string resume;               // checkpoint path to continue from
  std::function<bool(const EpochStats&)> after_epoch;  // return true to stop
};

struct TrainResult {
  Model model;
  std::vector<EpochStats> history;
  size_t ctc_skipped = 0;
};

// Frames needed for a CTC alignment: one per label plus one per adjacent
// repeat (the mandatory blank between them).
inline size_t ctc_min_frames(const std::vector<int>& tokens) {
  size_t need = tokens.size();
  for (size_t i = 1; i < tokens.size(); ++i)
    if (tokens[i] == tokens[i - 1]) ++need;
  return need;
}

namespace detail {

// Shuffle, then stable-sort by length, then cut whenever the frame budget
// is exceeded; the shuffle both mixes equal-length utterances and seeds
// the final batch-order shuffle.
inline std::vector<std::vector<size_t>> make_batches(const std::vector<Utterance>& data,
                                                     size_t batch_frames, Rng& rng) {
  std::vector<size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    return data[a].feats.frames < data[b].feats.frames;
  });
  std::vector<std::vector<size_t>> batches;
  std::vector<size_t> cur;
  size_t frames = 0;
  for (size_t i : idx) {
    if (!cur.empty() && frames + data[i].feats.frames > batch_frames) {
      batches.push_back(std::move(cur));
      cur.clear();
      frames = 0;
    }
    cur.push_back(i);
    frames += data[i].feats.frames;
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  rng.shuffle(batches);
  return batches;
}

struct UttLoss {
  Tensor ce_sum;
  Tensor ctc;
  bool has_ctc = false;
  size_t labels = 0;
};

inline UttLoss utt_forward(Tape& tape, const Model& model, const Utterance& u, real eps,
                           bool want_ctc, bool train_mode, Rng* drop) {
  Model::Forward fw = model.forward_teacher_forced(tape, u.feats.tensor(), u.tokens, train_mode, drop);
  std::vector<int> targets = u.tokens;
  targets.push_back(kEosId);
  std::vector<Tensor> terms;
  for (size_t i = 0; i < targets.size(); ++i)
    terms.push_back(ce_label_smoothed(tape, fw.dists[i], targets[i], eps));
  UttLoss out;
  out.ce_sum = terms.size() == 1 ? terms[0] : sum(tape, concat(tape, terms));
  out.labels = targets.size();
  if (want_ctc) {
    CtcResult r = ctc_loss(tape, model.ctc_frame_dists(tape, fw.enc_h), u.tokens, kBlankId);
    if (r.realizable) {
      out.ctc = r.loss;
      out.has_ctc = true;
    }
  }
  return out;
}

inline void save_train_checkpoint(const std::string& path, const Model& model, OptimState& optim,
                                  size_t stage, size_t stage_epoch, size_t global_epoch) {
  // Commit the live state to f32 before writing so memory and file agree
  // exactly; a resumed run then continues from the very same numbers.
  for (const auto& [name, t] : model.params()) {
    Tensor p = t;
    commit_f32(p);
  }
  for (auto& [name, t] : optim.m) commit_f32(t);
  for (auto& [name, t] : optim.v) commit_f32(t);
  for (real& v : optim.cv_history) v = static_cast<real>(static_cast<float>(v));

  std::map<std::string, Tensor> all(model.params().begin(), model.params().end());
  for (const auto& [name, t] : optim.m) all["optim.m." + name] = t;
  for (const auto& [name, t] : optim.v) all["optim.v." + name] = t;
  all["optim.step"] = Tensor::scalar(static_cast<real>(optim.step));
  all["optim.stage"] = Tensor::scalar(static_cast<real>(stage));
  all["optim.stage_epoch"] = Tensor::scalar(static_cast<real>(stage_epoch));
  all["optim.epoch"] = Tensor::scalar(static_cast<real>(global_epoch));
  if (!optim.cv_history.empty())
    all["optim.cv"] = Tensor::from({optim.cv_history.size()}, optim.cv_history);
  save_checkpoint(path, model.config(), all);
}

}  // namespace detail

inline TrainResult train(const std::vector<Utterance>& train_set,
                         const std::vector<Utterance>& cv_set, ModelConfig base,
                         const TrainConfig& cfg, const TrainOptions& opt = {}) {
  if (train_set.empty() || cv_set.empty()) throw DimError("train: datasets must be non-empty");
  std::vector<PretrainStage> sched =
      cfg.pretrain
          ? build_pretrain_schedule(cfg.target_layers, cfg.final_reduction, cfg.stage_epochs,
                                    cfg.epochs)
          : direct_schedule(cfg.target_layers, cfg.final_reduction, cfg.epochs);

  size_t start_stage = 0, start_stage_epoch = 0, global_epoch = 0;
  OptimState optim;
  base.enc_layers = sched[0].layers;
  base.pooling = sched[0].model_pooling();
  Model model(base);

  if (!opt.resume.empty()) {
    Checkpoint ck = load_checkpoint(opt.resume);
    auto scalar_of = [&](const std::string& name) {
      auto it = ck.tensors.find(name);
      if (it == ck.tensors.end()) throw FormatError("resume: checkpoint lacks " + name);
      return static_cast<size_t>(it->second.item());
    };
    start_stage = scalar_of("optim.stage");
    start_stage_epoch = scalar_of("optim.stage_epoch");
    global_epoch = scalar_of("optim.epoch");
    optim.step = scalar_of("optim.step");
    if (start_stage >= sched.size()) throw FormatError("resume: stage index out of range");
    const PretrainStage& stg = sched[start_stage];
    if (ck.cfg.enc_layers != stg.layers || ck.cfg.pooling != stg.model_pooling())
      throw FormatError("resume: checkpoint architecture does not match its stage");
    if (ck.cfg.vocab != base.vocab || ck.cfg.input_dim != base.input_dim ||
        ck.cfg.enc_units != base.enc_units || ck.cfg.dec_units != base.dec_units ||
        ck.cfg.att_dim != base.att_dim || ck.cfg.seed != base.seed)
      throw FormatError("resume: checkpoint configuration differs from the requested model");
    model = model_from_checkpoint(ck);
    for (const auto& [name, t] : model.params()) {
      auto m_it = ck.tensors.find("optim.m." + name);
      auto v_it = ck.tensors.find("optim.v." + name);
      if (m_it == ck.tensors.end() || v_it == ck.tensors.end())
        throw FormatError("resume: checkpoint lacks optimizer moments for " + name);
      optim.m[name] = m_it->second;
      optim.v[name] = v_it->second;
    }
    auto cv_it = ck.tensors.find("optim.cv");
    if (cv_it != ck.tensors.end()) optim.cv_history = cv_it->second.value();
  }

  std::vector<EpochStats> history;
  size_t skipped_total = 0;
  bool stop = false;

  for (size_t si = start_stage; si < sched.size() && !stop; ++si) {
    const PretrainStage& stage = sched[si];
    if (si != start_stage) {
      model = grow_to_stage(model, sched, si - 1, si);
      optim.cv_history.clear();
    }
    real eps = stage.label_smoothing && cfg.loss.smoothing_enabled ? cfg.loss.label_smoothing : 0.0;
    size_t red = stage.reduction();
    auto wants_ctc = [&](const Utterance& u) {
      if (cfg.loss.ctc_weight <= 0.0) return false;
      size_t frames_out = (u.feats.frames + red - 1) / red;
      return frames_out >= ctc_min_frames(u.tokens);
    };

    size_t first_epoch = si == start_stage ? start_stage_epoch : 0;
    for (size_t e = first_epoch; e < stage.epochs && !stop; ++e) {
      ++global_epoch;
      real lr_log = lr_schedule(optim.step, optim.cv_history, cfg.lr);
      Rng shuffle_rng = Rng::derive(cfg.seed, 0xA11CE, global_epoch);
      Rng drop_rng = Rng::derive(cfg.seed, 0xD0D0, global_epoch);
      std::vector<std::vector<size_t>> batches =
          detail::make_batches(train_set, cfg.batch_frames, shuffle_rng);

      real ce_total = 0, ctc_total = 0;
      size_t labels_total = 0, ctc_count = 0, skipped = 0;
      std::vector<Tensor> plist = model.parameters();
      for (const std::vector<size_t>& batch : batches) {
        for (Tensor& p : plist) p.zero_grad();
        size_t batch_labels = 0, batch_ctc = 0;
        for (size_t i : batch) {
          batch_labels += train_set[i].tokens.size() + 1;
          if (wants_ctc(train_set[i])) ++batch_ctc;
        }
        for (size_t i : batch) {
          const Utterance& u = train_set[i];
          bool want = wants_ctc(u);
          if (cfg.loss.ctc_weight > 0.0 && !want) ++skipped;
          Tape tape;
          detail::UttLoss ul = detail::utt_forward(tape, model, u, eps, want,
                                                   stage.encoder_dropout, &drop_rng);
          Tensor loss = scale(tape, ul.ce_sum, 1.0 / static_cast<real>(batch_labels));
          if (ul.has_ctc)
            loss = add(tape, loss,
                       scale(tape, ul.ctc, cfg.loss.ctc_weight / static_cast<real>(batch_ctc)));
          tape.backward(loss);
          ce_total += ul.ce_sum.item();
          labels_total += ul.labels;
          if (ul.has_ctc) {
            ctc_total += ul.ctc.item();
            ++ctc_count;
          }
        }
        clip_global_norm(plist, cfg.clip_norm);
        real lr = lr_schedule(optim.step, optim.cv_history, cfg.lr);
        adam_step(model.params(), optim, lr);
      }
      real train_loss = ce_total / static_cast<real>(labels_total) +
                        (ctc_count ? cfg.loss.ctc_weight * ctc_total / static_cast<real>(ctc_count)
                                   : 0.0);

      real cv_ce = 0, cv_ctc = 0;
      size_t cv_labels = 0, cv_nctc = 0;
      for (const Utterance& u : cv_set) {
        Tape t(false);
        detail::UttLoss ul = detail::utt_forward(t, model, u, eps, wants_ctc(u), false, nullptr);
        cv_ce += ul.ce_sum.item();
        cv_labels += ul.labels;
        if (ul.has_ctc) {
          cv_ctc += ul.ctc.item();
          ++cv_nctc;
        }
      }
      real cv_loss = cv_ce / static_cast<real>(cv_labels) +
                     (cv_nctc ? cfg.loss.ctc_weight * cv_ctc / static_cast<real>(cv_nctc) : 0.0);
      optim.cv_history.push_back(cv_loss);

      EpochStats stats{global_epoch, si, train_loss, cv_loss, lr_log, skipped};
      history.push_back(stats);
      skipped_total += skipped;
      if (opt.metrics)
        *opt.metrics << global_epoch << '\t' << si << '\t' << format_real(train_loss) << '\t'
                     << format_real(cv_loss) << '\t' << format_real(lr_log) << '\n';
      if (!opt.out_dir.empty()) {
        std::filesystem::path dir(opt.out_dir);
        detail::save_train_checkpoint((dir / ("epoch-" + std::to_string(global_epoch) + ".ckpt")).string(),
                                      model, optim, si, e + 1, global_epoch);
      }
      if (opt.after_epoch && opt.after_epoch(stats)) stop = true;
    }
  }
  return {std::move(model), std::move(history), skipped_total};
}

}  // namespace attnlab
