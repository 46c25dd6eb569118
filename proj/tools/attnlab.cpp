// Command-line front end: ties features, BPE, training, language models and
// beam-search decoding into reproducible experiments. Exit codes: 0 success,
// 1 usage error, 2 data/format error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "attnlab/config.hpp"
#include "attnlab/search.hpp"
#include "attnlab/trainer.hpp"

namespace {

using namespace attnlab;

// one normalized word list per non-empty line
std::vector<std::vector<std::string>> read_corpus(const std::string& path) {
  std::vector<std::vector<std::string>> out;
  for (const std::string& line : read_lines(path)) {
    std::vector<std::string> words = normalize_transcript(line);
    if (!words.empty()) out.push_back(std::move(words));
  }
  if (out.empty()) throw FormatError(path + ": no usable lines");
  return out;
}

std::vector<std::vector<int>> encode_corpus(const BpeModel& bpe,
                                            const std::vector<std::vector<std::string>>& lines) {
  std::vector<std::vector<int>> ids(lines.size());
  for (size_t i = 0; i < lines.size(); ++i) ids[i] = encode_words(bpe, lines[i]);
  return ids;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// every run that consumes a config logs the fully-resolved form
void log_config(const Config& cfg) {
  std::istringstream in(cfg.canonical());
  std::string line;
  while (std::getline(in, line)) std::cerr << "# " << line << "\n";
}

Config load_config(const std::string& path) {
  Config cfg = path.empty() ? Config() : Config::parse_file(path);
  log_config(cfg);
  return cfg;
}

MfccConfig mfcc_from(const Config& cfg) {
  MfccConfig m;
  m.mean_subtract = cfg.getb("features.mean_subtract");
  return m;
}

ModelConfig model_from(const Config& cfg, size_t vocab, uint64_t seed) {
  ModelConfig m;
  m.input_dim = static_cast<size_t>(cfg.geti("model.input_dim"));
  m.enc_units = static_cast<size_t>(cfg.geti("model.encoder_units"));
  m.dec_units = static_cast<size_t>(cfg.geti("model.decoder_units"));
  m.att_dim = static_cast<size_t>(cfg.geti("model.attention_dim"));
  m.dropout = cfg.getf("model.dropout");
  m.vocab = vocab;
  m.seed = seed;
  return m;  // encoder depth and pooling come from the training schedule
}

TrainConfig train_from(const Config& cfg, uint64_t seed) {
  TrainConfig t;
  t.epochs = static_cast<size_t>(cfg.geti("train.epochs"));
  t.stage_epochs = static_cast<size_t>(cfg.geti("train.stage_epochs"));
  t.pretrain = cfg.getb("train.pretrain");
  t.target_layers = static_cast<size_t>(cfg.geti("model.encoder_layers"));
  t.final_reduction = static_cast<size_t>(cfg.geti("train.final_reduction"));
  t.batch_frames = static_cast<size_t>(cfg.geti("train.batch_frames"));
  t.clip_norm = cfg.getf("train.clip_norm");
  t.lr.base = cfg.getf("train.lr");
  t.lr.warmup_steps = static_cast<size_t>(cfg.geti("train.warmup_steps"));
  t.lr.newbob_threshold = cfg.getf("train.newbob_threshold");
  t.lr.newbob_decay = cfg.getf("train.newbob_decay");
  t.lr.floor = cfg.getf("train.lr_floor");
  t.loss.label_smoothing = cfg.getf("loss.label_smoothing");
  t.loss.ctc_weight = cfg.getf("loss.ctc_weight");
  t.seed = seed;
  return t;
}

// an ARPA file starts with \data\; anything else is an LSTM checkpoint
struct LoadedLm {
  std::optional<NGramLM> ngram;
  std::optional<LstmLM> lstm;

  LmScorer scorer(size_t vocab) const {
    if (ngram) return LmScorer(&*ngram, vocab);
    return LmScorer(&*lstm);
  }
};

LoadedLm load_lm(const std::string& path) {
  LoadedLm out;
  std::string text = read_file(path);
  if (text.rfind("\\data\\", 0) == 0)
    out.ngram = read_arpa(text);
  else
    out.lstm = load_lstm_lm(path);
  return out;
}

BpeModel load_bpe_checked(const std::string& merges, const std::string& vocab,
                          const Model* model = nullptr) {
  BpeModel bpe = load_bpe(merges, vocab);
  if (model && bpe.size() != model->config().vocab)
    throw FormatError("bpe vocabulary (" + std::to_string(bpe.size()) +
                      " tokens) does not match checkpoint vocabulary (" +
                      std::to_string(model->config().vocab) + ")");
  return bpe;
}

struct FusionFlags {
  std::string lm_path;
  real lm_weight = -1.0;  // <0: take the config default
  LoadedLm loaded;

  FusionConfig resolve(const Config& cfg, size_t vocab) {
    FusionConfig fusion;
    if (lm_path.empty()) return fusion;
    loaded = load_lm(lm_path);
    fusion.lm = loaded.scorer(vocab);
    fusion.lambda = lm_weight >= 0.0 ? lm_weight : cfg.getf("search.lm_weight");
    return fusion;
  }
};

int dispatch(int argc, char** argv) {
  CLI::App app{"attention-based speech recognizer"};
  app.require_subcommand(1);

  std::string config_path, manifest, out_path, merges, vocab, corpus, checkpoint, resume;
  std::string ref_path, hyp_path;
  uint64_t seed = 0;
  size_t num_merges = 1000, n_train = 200, n_dev = 40, nbest = 1, beam = 0, order = 0;
  FusionFlags fusion_flags;

  // featurize -----------------------------------------------------------
  auto* featurize = app.add_subcommand("featurize", "compute mfcc features into a cache dir");
  featurize->add_option("--manifest", manifest, "input manifest tsv")->required();
  featurize->add_option("--out", out_path, "output directory for .feat files")->required();
  featurize->add_option("--config", config_path, "config file");
  featurize->callback([&] {
    Config cfg = load_config(config_path);
    MfccConfig mfcc = mfcc_from(cfg);
    std::filesystem::create_directories(out_path);
    auto entries = filter_max_chars(read_manifest(manifest),
                                    static_cast<size_t>(cfg.geti("data.max_chars")));
    for (const ManifestEntry& e : entries) {
      Features f = compute_mfcc(read_wav(resolve_wav_path(manifest, e.wav_path)), mfcc);
      for (real& v : f.data) v = static_cast<real>(static_cast<float>(v));
      write_feature_cache((std::filesystem::path(out_path) / (e.id + ".feat")).string(), f);
      std::cout << e.id << '\t' << f.frames << '\t' << f.dim << "\n";
    }
  });

  // bpe -----------------------------------------------------------------
  auto* bpe_learn = app.add_subcommand("bpe-learn", "learn bpe merges from a text corpus");
  bpe_learn->add_option("--corpus", corpus, "text corpus, one sentence per line")->required();
  bpe_learn->add_option("--merges", merges, "output merges file")->required();
  bpe_learn->add_option("--vocab", vocab, "output vocabulary file")->required();
  bpe_learn->add_option("--num-merges", num_merges, "merge operations to learn");
  bpe_learn->callback([&] {
    BpeModel bpe = learn_bpe(read_corpus(corpus), num_merges);
    save_merges(merges, bpe);
    save_vocab(vocab, bpe);
    std::cerr << "learned " << bpe.merges.size() << " merges, " << bpe.size() << " tokens\n";
  });

  auto* bpe_apply = app.add_subcommand("bpe-apply", "segment text into subword tokens");
  bpe_apply->add_option("--merges", merges, "merges file")->required();
  bpe_apply->add_option("--vocab", vocab, "vocabulary file")->required();
  bpe_apply->add_option("--in", corpus, "input text file")->required();
  bpe_apply->add_option("--out", out_path, "output file, one segmented line per input line")
      ->required();
  bpe_apply->callback([&] {
    BpeModel bpe = load_bpe(merges, vocab);
    std::string out;
    for (const std::string& line : read_lines(corpus)) {
      std::vector<std::string> pieces;
      for (const std::string& w : normalize_transcript(line))
        for (const std::string& tok : encode_word_tokens(bpe, w)) pieces.push_back(tok);
      out += join_words(pieces) + "\n";
    }
    write_file(out_path, out);
  });

  // train ----------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "train the recognizer");
  train_cmd->add_option("--train", manifest, "training manifest")->required();
  std::string dev_manifest;
  train_cmd->add_option("--dev", dev_manifest, "cross-validation manifest")->required();
  train_cmd->add_option("--merges", merges, "merges file")->required();
  train_cmd->add_option("--vocab", vocab, "vocabulary file")->required();
  train_cmd->add_option("--out", out_path, "checkpoint directory");
  train_cmd->add_option("--config", config_path, "config file");
  train_cmd->add_option("--resume", resume, "checkpoint to resume from");
  train_cmd->add_option("--seed", seed, "random seed");
  train_cmd->callback([&] {
    Config cfg = load_config(config_path);
    BpeModel bpe = load_bpe(merges, vocab);
    MfccConfig mfcc = mfcc_from(cfg);
    size_t max_chars = static_cast<size_t>(cfg.geti("data.max_chars"));
    std::vector<Utterance> train_set = load_dataset(manifest, bpe, mfcc, max_chars);
    std::vector<Utterance> dev_set = load_dataset(dev_manifest, bpe, mfcc, max_chars);
    TrainOptions opt;
    opt.out_dir = out_path;
    opt.metrics = &std::cout;
    opt.resume = resume;
    TrainResult res = train(train_set, dev_set, model_from(cfg, bpe.size(), seed),
                            train_from(cfg, seed), opt);
    std::cerr << "ctc_skipped=" << res.ctc_skipped << "\n";
  });

  // decode / score / analyze-search ---------------------------------------
  auto add_decode_flags = [&](CLI::App* cmd, bool with_beam) {
    cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    cmd->add_option("--manifest", manifest, "manifest to process")->required();
    cmd->add_option("--merges", merges, "merges file")->required();
    cmd->add_option("--vocab", vocab, "vocabulary file")->required();
    cmd->add_option("--config", config_path, "config file");
    cmd->add_option("--lm", fusion_flags.lm_path, "arpa file or lstm lm checkpoint");
    cmd->add_option("--lm-weight", fusion_flags.lm_weight, "shallow fusion weight");
    if (with_beam) cmd->add_option("--beam", beam, "beam size");
  };

  auto* decode = app.add_subcommand("decode", "beam-search decode a manifest");
  add_decode_flags(decode, true);
  decode->add_option("--nbest", nbest, "hypotheses to print per utterance");
  decode->callback([&] {
    Config cfg = load_config(config_path);
    Model model = load_model(checkpoint);
    BpeModel bpe = load_bpe_checked(merges, vocab, &model);
    std::vector<Utterance> data = load_dataset(manifest, bpe, mfcc_from(cfg),
                                               static_cast<size_t>(cfg.geti("data.max_chars")));
    FusionConfig fusion = fusion_flags.resolve(cfg, model.config().vocab);
    size_t beam_size = beam ? beam : static_cast<size_t>(cfg.geti("search.beam"));
    for (const Utterance& u : data) {
      std::vector<Hypothesis> hyps = beam_search(model, u.feats.tensor(), beam_size, fusion);
      size_t n = std::min(nbest, hyps.size());
      for (size_t k = 0; k < n; ++k) {
        std::string words = join_words(merge_to_words(bpe, hyps[k].tokens));
        std::cout << u.id << '\t';
        if (nbest > 1) std::cout << k + 1 << '\t';
        std::cout << format_real(hyps[k].fused(fusion.lambda)) << '\t' << words << "\n";
      }
    }
  });

  auto* score = app.add_subcommand("score", "teacher-forced scores of the reference transcripts");
  add_decode_flags(score, false);
  score->callback([&] {
    Config cfg = load_config(config_path);
    Model model = load_model(checkpoint);
    BpeModel bpe = load_bpe_checked(merges, vocab, &model);
    std::vector<Utterance> data = load_dataset(manifest, bpe, mfcc_from(cfg),
                                               static_cast<size_t>(cfg.geti("data.max_chars")));
    FusionConfig fusion = fusion_flags.resolve(cfg, model.config().vocab);
    for (const Utterance& u : data) {
      Hypothesis h = score_sequence(model, u.feats.tensor(), u.tokens, fusion);
      std::cout << u.id << '\t' << format_real(h.fused(fusion.lambda)) << "\n";
    }
  });

  auto* analyze = app.add_subcommand("analyze-search", "decoded-vs-reference score analysis");
  add_decode_flags(analyze, true);
  analyze->callback([&] {
    Config cfg = load_config(config_path);
    Model model = load_model(checkpoint);
    BpeModel bpe = load_bpe_checked(merges, vocab, &model);
    std::vector<Utterance> data = load_dataset(manifest, bpe, mfcc_from(cfg),
                                               static_cast<size_t>(cfg.geti("data.max_chars")));
    FusionConfig fusion = fusion_flags.resolve(cfg, model.config().vocab);
    size_t beam_size = beam ? beam : static_cast<size_t>(cfg.geti("search.beam"));
    search_error_analysis(model, data, bpe, beam_size, fusion, &std::cout);
  });

  // language models --------------------------------------------------------
  auto* lm_ngram = app.add_subcommand("lm-train-ngram", "train a kneser-ney n-gram lm");
  lm_ngram->add_option("--corpus", corpus, "text corpus")->required();
  lm_ngram->add_option("--merges", merges, "merges file")->required();
  lm_ngram->add_option("--vocab", vocab, "vocabulary file")->required();
  lm_ngram->add_option("--out", out_path, "output arpa file")->required();
  lm_ngram->add_option("--order", order, "n-gram order");
  lm_ngram->add_option("--config", config_path, "config file");
  lm_ngram->callback([&] {
    Config cfg = load_config(config_path);
    BpeModel bpe = load_bpe(merges, vocab);
    std::vector<std::vector<int>> ids = encode_corpus(bpe, read_corpus(corpus));
    size_t n = order ? order : static_cast<size_t>(cfg.geti("lm.order"));
    NGramLM lm = train_kn(ids, n);
    write_file(out_path, write_arpa(lm));
    std::cerr << "order=" << lm.order << " events=" << lm.event_vocab.size() << "\n";
  });

  auto* lm_lstm = app.add_subcommand("lm-train-lstm", "train an lstm lm");
  lm_lstm->add_option("--corpus", corpus, "text corpus")->required();
  lm_lstm->add_option("--merges", merges, "merges file")->required();
  lm_lstm->add_option("--vocab", vocab, "vocabulary file")->required();
  lm_lstm->add_option("--out", out_path, "output checkpoint")->required();
  lm_lstm->add_option("--config", config_path, "config file");
  lm_lstm->add_option("--seed", seed, "random seed");
  lm_lstm->callback([&] {
    Config cfg = load_config(config_path);
    BpeModel bpe = load_bpe(merges, vocab);
    std::vector<std::vector<int>> ids = encode_corpus(bpe, read_corpus(corpus));
    LstmLmConfig lc;
    if (cfg.gets("lm.preset") == "large") {
      lc = large_lm_config(bpe.size());
    } else if (cfg.gets("lm.preset") == "desk") {
      lc.vocab = bpe.size();
      lc.embed = static_cast<size_t>(cfg.geti("lm.embed_dim"));
      lc.layers = static_cast<size_t>(cfg.geti("lm.layers"));
      lc.units = static_cast<size_t>(cfg.geti("lm.units"));
      lc.dropout = cfg.getf("lm.dropout");
    } else {
      throw FormatError("lm.preset must be desk or large, got '" + cfg.gets("lm.preset") + "'");
    }
    lc.seed = seed;
    LstmLmTrainConfig tc;
    tc.epochs = static_cast<size_t>(cfg.geti("lm.epochs"));
    tc.lr = cfg.getf("lm.lr");
    tc.clip = cfg.getf("lm.clip_norm");
    tc.seed = seed;
    LstmLM lm = train_lstm_lm(ids, lc, tc, &std::cout);
    save_lstm_lm(out_path, lm);
  });

  auto* ppl = app.add_subcommand("ppl", "perplexity of an lm on a text corpus");
  ppl->add_option("--lm", fusion_flags.lm_path, "arpa file or lstm lm checkpoint")->required();
  ppl->add_option("--corpus", corpus, "text corpus")->required();
  ppl->add_option("--merges", merges, "merges file")->required();
  ppl->add_option("--vocab", vocab, "vocabulary file")->required();
  ppl->callback([&] {
    BpeModel bpe = load_bpe(merges, vocab);
    std::vector<std::vector<int>> ids = encode_corpus(bpe, read_corpus(corpus));
    LoadedLm lm = load_lm(fusion_flags.lm_path);
    real p = lm.ngram ? perplexity(*lm.ngram, ids) : perplexity(*lm.lstm, ids);
    std::cout << "ppl=" << format_real(p) << "\n";
  });

  // scoring and toy data -----------------------------------------------------
  auto* wer_cmd = app.add_subcommand("wer", "corpus word error rate between two text files");
  wer_cmd->add_option("--ref", ref_path, "reference text, one utterance per line")->required();
  wer_cmd->add_option("--hyp", hyp_path, "hypothesis text, one utterance per line")->required();
  wer_cmd->callback([&] {
    std::vector<std::string> ref_lines = read_lines(ref_path);
    std::vector<std::string> hyp_lines = read_lines(hyp_path);
    if (ref_lines.size() != hyp_lines.size())
      throw FormatError("wer: " + ref_path + " has " + std::to_string(ref_lines.size()) +
                        " lines but " + hyp_path + " has " + std::to_string(hyp_lines.size()));
    size_t edits = 0, ref_words = 0;
    for (size_t i = 0; i < ref_lines.size(); ++i) {
      std::vector<std::string> r = normalize_transcript(ref_lines[i]);
      edits += edit_distance(r, normalize_transcript(hyp_lines[i]));
      ref_words += r.size();
    }
    real rate = static_cast<real>(edits) / static_cast<real>(std::max<size_t>(ref_words, 1));
    std::printf("wer=%.4f\n", rate);
  });

  auto* toy = app.add_subcommand("make-toy-data", "synthesize a toy tone-word corpus");
  toy->add_option("--out", out_path, "output directory")->required();
  toy->add_option("--train", n_train, "training utterances");
  toy->add_option("--dev", n_dev, "dev utterances");
  toy->add_option("--seed", seed, "random seed");
  toy->callback([&] {
    ToyData paths = make_toy_data(out_path, n_train, n_dev, seed);
    std::cout << "train_manifest=" << paths.train_manifest << "\n";
    std::cout << "dev_manifest=" << paths.dev_manifest << "\n";
    std::cout << "lm_corpus=" << paths.lm_corpus << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const std::exception& ex) {
    std::cerr << "attnlab: " << ex.what() << "\n";
    return 2;
  }
}
