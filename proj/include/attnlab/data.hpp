#pragma once

// Corpus plumbing: manifest files (id <TAB> wav-path <TAB> transcript),
// transcript normalization, dataset assembly with cached/prefetched
// features, and a synthetic tone-word corpus whose audio-to-text mapping is
// easy enough for a desk-scale model to learn.

#include <atomic>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "attnlab/bpe.hpp"
#include "attnlab/features.hpp"
#include "attnlab/io.hpp"
#include "attnlab/queue.hpp"

namespace attnlab {

struct ManifestEntry {
  std::string id;
  std::string wav_path;  // possibly relative to the manifest directory
  std::vector<std::string> words;
};

// lowercase, whitespace-collapsed word list
inline std::vector<std::string> normalize_transcript(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::vector<ManifestEntry> entries;
  std::set<std::string> ids;
  size_t lineno = 0;
  for (const std::string& line : read_lines(path)) {
    ++lineno;
    if (line.empty()) continue;
    size_t t1 = line.find('\t');
    size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos)
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
    ManifestEntry e;
    e.id = line.substr(0, t1);
    e.wav_path = line.substr(t1 + 1, t2 - t1 - 1);
    e.words = normalize_transcript(line.substr(t2 + 1));
    if (e.id.empty()) throw FormatError(path + ":" + std::to_string(lineno) + ": empty utterance id");
    if (!ids.insert(e.id).second)
      throw FormatError(path + ":" + std::to_string(lineno) + ": duplicate utterance id " + e.id);
    if (e.words.empty())
      throw FormatError(path + ":" + std::to_string(lineno) + ": empty transcript for " + e.id);
    entries.push_back(std::move(e));
  }
  return entries;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const ManifestEntry& e : entries) {
    out += e.id + "\t" + e.wav_path + "\t";
    for (size_t i = 0; i < e.words.size(); ++i) out += (i ? " " : "") + e.words[i];
    out += "\n";
  }
  write_file(path, out);
}

inline std::string resolve_wav_path(const std::string& manifest_path, const std::string& wav_path) {
  std::filesystem::path p(wav_path);
  if (p.is_absolute()) return wav_path;
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

// drop utterances whose normalized transcript exceeds max_chars characters
// (spaces included); max_chars == 0 disables the filter
inline std::vector<ManifestEntry> filter_max_chars(std::vector<ManifestEntry> entries, size_t max_chars) {
  if (max_chars == 0) return entries;
  std::vector<ManifestEntry> kept;
  for (ManifestEntry& e : entries) {
    size_t len = 0;
    for (size_t i = 0; i < e.words.size(); ++i) len += e.words[i].size() + (i ? 1 : 0);
    if (len <= max_chars) kept.push_back(std::move(e));
  }
  return kept;
}

// ---------------------------------------------------------------------------
// dataset assembly

struct Utterance {
  std::string id;
  Features feats;
  std::vector<int> tokens;  // BPE ids of the transcript, no BOS/EOS
  std::vector<std::string> words;
};

inline const char* kCacheEnv = "ATTNLAB_CACHE_DIR";

inline Features features_for(const std::string& wav_path, const std::string& utt_id, const MfccConfig& cfg) {
  const char* cache_dir = std::getenv(kCacheEnv);
  std::string cache_path;
  if (cache_dir && *cache_dir) {
    cache_path = (std::filesystem::path(cache_dir) / (utt_id + ".feat")).string();
    if (std::filesystem::exists(cache_path)) return read_feature_cache(cache_path);
  }
  Features f = compute_mfcc(read_wav(wav_path), cfg);
  // commit to f32 so cached and uncached loads are bit-identical
  for (real& v : f.data) v = static_cast<real>(static_cast<float>(v));
  if (!cache_path.empty()) write_feature_cache(cache_path, f);
  return f;
}

// Features are computed by a producer thread running ahead of the consumer
// through a bounded queue; output order is the manifest order either way.
inline std::vector<Utterance> load_dataset(const std::string& manifest_path, const BpeModel& bpe,
                                           const MfccConfig& mfcc_cfg = {}, size_t max_chars = 0) {
  std::vector<ManifestEntry> entries = filter_max_chars(read_manifest(manifest_path), max_chars);
  std::vector<Utterance> out(entries.size());

  struct Item {
    size_t index;
    Features feats;
  };
  BoundedQueue<Item> queue(8);
  std::atomic<bool> failed{false};
  std::string error;
  std::thread producer([&] {
    for (size_t i = 0; i < entries.size(); ++i) {
      if (failed.load()) break;
      try {
        Features f = features_for(resolve_wav_path(manifest_path, entries[i].wav_path), entries[i].id, mfcc_cfg);
        queue.push({i, std::move(f)});
      } catch (const std::exception& ex) {
        error = ex.what();
        failed.store(true);
        break;
      }
    }
    queue.close();
  });

  size_t received = 0;
  while (auto item = queue.pop()) {
    size_t i = item->index;
    out[i].id = entries[i].id;
    out[i].words = entries[i].words;
    out[i].feats = std::move(item->feats);
    out[i].tokens = encode_words(bpe, entries[i].words);
    ++received;
  }
  producer.join();
  if (failed.load()) throw IoError("load_dataset: " + error);
  if (received != entries.size()) throw IoError("load_dataset: feature pipeline stopped early");
  for (const Utterance& u : out)
    if (u.feats.frames == 0)
      throw FormatError("load_dataset: utterance " + u.id + " is shorter than one analysis window");
  return out;
}

// ---------------------------------------------------------------------------
// synthetic corpus: every word is a fixed two-tone pattern, sentences come
// from a small subject-verb-object grammar

inline const std::vector<std::string>& toy_names() {
  static const std::vector<std::string> v{"anna", "boris", "clara", "david", "elena", "felix", "greta", "henry"};
  return v;
}
inline const std::vector<std::string>& toy_verbs() {
  static const std::vector<std::string> v{"brings", "takes", "sees", "finds", "likes", "wants", "holds"};
  return v;
}
inline const std::vector<std::string>& toy_objects() {
  static const std::vector<std::string> v{"apples", "bread", "cheese", "grapes", "melons", "olives", "plums", "rice"};
  return v;
}
inline const std::vector<std::string>& toy_adverbs() {
  static const std::vector<std::string> v{"today", "slowly", "quickly", "often", "rarely", "now"};
  return v;
}

inline const std::vector<std::string>& toy_vocabulary() {
  static const std::vector<std::string> all = [] {
    std::vector<std::string> v;
    for (const auto* list : {&toy_names(), &toy_verbs(), &toy_objects(), &toy_adverbs()})
      v.insert(v.end(), list->begin(), list->end());
    return v;
  }();
  return all;
}

namespace detail {

inline size_t toy_word_index(const std::string& word) {
  const std::vector<std::string>& all = toy_vocabulary();
  for (size_t i = 0; i < all.size(); ++i)
    if (all[i] == word) return i;
  throw FormatError("toy corpus: unknown word " + word);
}

inline void toy_append_word(std::vector<real>& samples, const std::string& word, uint32_t rate, Rng& rng) {
  static const real palette[10] = {380, 486, 622, 797, 1020, 1306, 1672, 2140, 2739, 3506};
  size_t idx = toy_word_index(word);
  real freqs[2] = {palette[idx / 10], palette[idx % 10]};
  size_t syl = static_cast<size_t>(0.070 * rate);
  size_t gap = static_cast<size_t>(0.012 * rate);
  size_t ramp = static_cast<size_t>(0.005 * rate);
  for (int s = 0; s < 2; ++s) {
    real amp = 0.28 * (1.0 + 0.15 * (rng.uniform() - 0.5));
    for (size_t i = 0; i < syl; ++i) {
      real env = 1.0;
      if (i < ramp) env = static_cast<real>(i) / static_cast<real>(ramp);
      if (syl - i <= ramp) env = static_cast<real>(syl - i) / static_cast<real>(ramp);
      samples.push_back(amp * env * std::sin(2.0 * M_PI * freqs[s] * static_cast<real>(i) / rate));
    }
    if (s == 0) samples.insert(samples.end(), gap, 0.0);
  }
}

}  // namespace detail

inline Wav render_toy_utterance(const std::vector<std::string>& words, uint64_t seed, uint32_t rate = 16000) {
  Wav w;
  w.sample_rate = rate;
  Rng rng(seed);
  size_t edge = static_cast<size_t>(0.040 * rate);
  size_t word_gap = static_cast<size_t>(0.055 * rate);
  w.samples.insert(w.samples.end(), edge, 0.0);
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) w.samples.insert(w.samples.end(), word_gap, 0.0);
    detail::toy_append_word(w.samples, words[i], rate, rng);
  }
  w.samples.insert(w.samples.end(), edge, 0.0);
  for (real& s : w.samples) s += 0.004 * rng.normal();
  return w;
}

struct ToyData {
  std::string train_manifest;
  std::string dev_manifest;
  std::string lm_corpus;  // train transcripts, one sentence per line
};

inline ToyData make_toy_data(const std::string& dir, size_t n_train, size_t n_dev, uint64_t seed) {
  std::filesystem::create_directories(std::filesystem::path(dir) / "wav");
  auto sentence = [](Rng& rng) {
    std::vector<std::string> words;
    words.push_back(toy_names()[rng.index(toy_names().size())]);
    words.push_back(toy_verbs()[rng.index(toy_verbs().size())]);
    words.push_back(toy_objects()[rng.index(toy_objects().size())]);
    if (rng.uniform() < 0.5) words.push_back(toy_adverbs()[rng.index(toy_adverbs().size())]);
    return words;
  };

  ToyData paths;
  std::string corpus_text;
  for (int split = 0; split < 2; ++split) {
    size_t n = split == 0 ? n_train : n_dev;
    std::string prefix = split == 0 ? "train" : "dev";
    Rng rng = Rng::derive(seed, 0xDA7A, split);
    std::vector<ManifestEntry> entries;
    for (size_t i = 0; i < n; ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "%s-%04zu", prefix.c_str(), i);
      std::vector<std::string> words = sentence(rng);
      Wav wav = render_toy_utterance(words, Rng::derive(seed, 0xA0D10 + split, i).next());
      std::string rel = "wav/" + std::string(id) + ".wav";
      write_wav((std::filesystem::path(dir) / rel).string(), wav);
      ManifestEntry e;
      e.id = id;
      e.wav_path = rel;
      e.words = words;
      entries.push_back(e);
      if (split == 0) {
        for (size_t k = 0; k < words.size(); ++k) corpus_text += (k ? " " : "") + words[k];
        corpus_text += "\n";
      }
    }
    std::string mpath = (std::filesystem::path(dir) / (prefix + ".tsv")).string();
    write_manifest(mpath, entries);
    (split == 0 ? paths.train_manifest : paths.dev_manifest) = mpath;
  }
  paths.lm_corpus = (std::filesystem::path(dir) / "lm_corpus.txt").string();
  write_file(paths.lm_corpus, corpus_text);
  return paths;
}

}  // namespace attnlab
