#pragma once

// Byte-pair subword units over UTF-8 code points. Merges are learned on
// marker-free symbols (most frequent adjacent pair, lexicographic
// tie-break); when a word is emitted, every non-final subword carries the
// "@@" continuation marker, which is what lets decoding rebuild words.
// Bracketed event tokens like "[noise]" stay atomic.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "attnlab/io.hpp"

namespace attnlab {

constexpr int kBosId = 0;
constexpr int kEosId = 1;
constexpr int kBlankId = 2;
constexpr int kUnkId = 3;

inline const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> r{"<s>", "</s>", "<blank>", "<unk>"};
  return r;
}

inline std::vector<std::string> default_special_tokens() {
  return {"[laughter]", "[noise]", "[vocalized-noise]"};
}

// split a word into UTF-8 code points; bytes that do not form a valid
// sequence become single-byte symbols
inline std::vector<std::string> utf8_split(const std::string& word) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < word.size()) {
    unsigned char c = static_cast<unsigned char>(word[i]);
    size_t len = 1;
    if ((c & 0x80) == 0x00)
      len = 1;
    else if ((c & 0xe0) == 0xc0)
      len = 2;
    else if ((c & 0xf0) == 0xe0)
      len = 3;
    else if ((c & 0xf8) == 0xf0)
      len = 4;
    if (i + len > word.size()) len = 1;
    for (size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(word[i + k]) & 0xc0) != 0x80) {
        len = 1;
        break;
      }
    out.push_back(word.substr(i, len));
    i += len;
  }
  return out;
}

inline bool is_special_token(const std::string& tok) {
  return tok.size() >= 2 && tok.front() == '[' && tok.back() == ']';
}

struct BpeModel {
  std::vector<std::pair<std::string, std::string>> merges;  // in priority order
  std::vector<std::string> vocab;                           // id -> token
  std::unordered_map<std::string, int> ids;                 // token -> id
  std::set<std::string> specials;

  int id_of(const std::string& tok) const {
    auto it = ids.find(tok);
    return it == ids.end() ? kUnkId : it->second;
  }

  size_t size() const { return vocab.size(); }
};

namespace detail {

// merge every adjacent (x,y) left to right; a merged symbol does not overlap
// with the next match
inline bool apply_pair(std::vector<std::string>& syms, const std::pair<std::string, std::string>& p) {
  bool changed = false;
  std::vector<std::string> out;
  out.reserve(syms.size());
  size_t i = 0;
  while (i < syms.size()) {
    if (i + 1 < syms.size() && syms[i] == p.first && syms[i + 1] == p.second) {
      out.push_back(p.first + p.second);
      i += 2;
      changed = true;
    } else {
      out.push_back(syms[i]);
      ++i;
    }
  }
  if (changed) syms = std::move(out);
  return changed;
}

inline void rebuild_ids(BpeModel& m) {
  m.ids.clear();
  for (size_t i = 0; i < m.vocab.size(); ++i) m.ids.emplace(m.vocab[i], static_cast<int>(i));
}

inline void push_token(BpeModel& m, const std::string& tok) {
  if (m.ids.count(tok)) return;
  m.ids.emplace(tok, static_cast<int>(m.vocab.size()));
  m.vocab.push_back(tok);
}

}  // namespace detail

// Learn `num_merges` merges from whitespace-split corpus lines. Stops early
// once the best pair occurs fewer than twice. The vocabulary holds the
// reserved tokens, the sorted specials, then plain and marked spellings of
// every character and merge output, in that order.
inline BpeModel learn_bpe(const std::vector<std::vector<std::string>>& corpus, size_t num_merges,
                          std::vector<std::string> special_tokens = default_special_tokens()) {
  BpeModel m;
  m.specials.insert(special_tokens.begin(), special_tokens.end());

  std::map<std::vector<std::string>, size_t> types;  // word type -> count
  std::set<std::string> alphabet;
  for (const auto& line : corpus)
    for (const std::string& w : line) {
      if (w.empty() || m.specials.count(w)) continue;
      std::vector<std::string> syms = utf8_split(w);
      for (const std::string& s : syms) alphabet.insert(s);
      ++types[syms];
    }

  for (size_t round = 0; round < num_merges; ++round) {
    std::map<std::pair<std::string, std::string>, size_t> counts;
    for (const auto& [syms, n] : types)
      for (size_t i = 0; i + 1 < syms.size(); ++i) counts[{syms[i], syms[i + 1]}] += n;
    std::pair<std::string, std::string> best;
    size_t best_n = 0;
    for (const auto& [p, n] : counts)
      if (n > best_n) {  // map iteration is sorted, so ties keep the smaller pair
        best = p;
        best_n = n;
      }
    if (best_n < 2) break;
    m.merges.push_back(best);
    std::map<std::vector<std::string>, size_t> next;
    for (auto& [syms, n] : types) {
      std::vector<std::string> s = syms;
      detail::apply_pair(s, best);
      next[std::move(s)] += n;
    }
    types = std::move(next);
  }

  for (const std::string& r : reserved_tokens()) detail::push_token(m, r);
  for (const std::string& s : m.specials) detail::push_token(m, s);
  for (const std::string& c : alphabet) {
    detail::push_token(m, c);
    detail::push_token(m, c + "@@");
  }
  for (const auto& p : m.merges) {
    detail::push_token(m, p.first + p.second);
    detail::push_token(m, p.first + p.second + "@@");
  }
  return m;
}

// word -> subword token strings (continuation markers attached, specials atomic)
inline std::vector<std::string> encode_word_tokens(const BpeModel& m, const std::string& word) {
  if (word.empty()) return {};
  if (m.specials.count(word)) return {word};
  std::vector<std::string> syms = utf8_split(word);
  // apply merges in priority order until none applies
  for (;;) {
    bool changed = false;
    for (const auto& p : m.merges)
      if (detail::apply_pair(syms, p)) {
        changed = true;
        break;
      }
    if (!changed) break;
  }
  for (size_t i = 0; i + 1 < syms.size(); ++i) syms[i] += "@@";
  return syms;
}

inline std::vector<int> encode_words(const BpeModel& m, const std::vector<std::string>& words) {
  std::vector<int> out;
  for (const std::string& w : words)
    for (const std::string& tok : encode_word_tokens(m, w)) out.push_back(m.id_of(tok));
  return out;
}

// inverse of encode_words for in-vocabulary text: join marked tokens into
// words; reserved structural tokens are dropped
inline std::vector<std::string> merge_to_words(const BpeModel& m, const std::vector<int>& tokens) {
  std::vector<std::string> words;
  std::string cur;
  for (int id : tokens) {
    if (id == kBosId || id == kEosId || id == kBlankId) continue;
    if (id < 0 || static_cast<size_t>(id) >= m.vocab.size())
      throw FormatError("merge_to_words: token id out of range");
    const std::string& tok = m.vocab[id];
    if (tok.size() > 2 && tok.compare(tok.size() - 2, 2, "@@") == 0) {
      cur += tok.substr(0, tok.size() - 2);
    } else {
      cur += tok;
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);  // dangling continuation
  return words;
}

// ---------------------------------------------------------------------------
// text formats: merges as "x y" lines, vocabulary as one token per line

inline void save_merges(const std::string& path, const BpeModel& m) {
  std::string out;
  for (const auto& p : m.merges) out += p.first + " " + p.second + "\n";
  write_file(path, out);
}

inline void save_vocab(const std::string& path, const BpeModel& m) {
  std::string out;
  for (const std::string& tok : m.vocab) out += tok + "\n";
  write_file(path, out);
}

inline BpeModel load_bpe(const std::string& merges_path, const std::string& vocab_path) {
  BpeModel m;
  size_t lineno = 0;
  for (const std::string& line : read_lines(merges_path)) {
    ++lineno;
    if (line.empty()) continue;
    size_t sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() || line.find(' ', sp + 1) != std::string::npos)
      throw FormatError(merges_path + ":" + std::to_string(lineno) + ": expected two space-separated symbols");
    m.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  for (const std::string& line : read_lines(vocab_path)) {
    if (line.empty()) continue;
    if (m.ids.count(line)) throw FormatError(vocab_path + ": duplicate token " + line);
    detail::push_token(m, line);
  }
  const auto& res = reserved_tokens();
  if (m.vocab.size() < res.size()) throw FormatError(vocab_path + ": missing reserved tokens");
  for (size_t i = 0; i < res.size(); ++i)
    if (m.vocab[i] != res[i]) throw FormatError(vocab_path + ": reserved token " + res[i] + " not at id " + std::to_string(i));
  for (const std::string& tok : m.vocab)
    if (is_special_token(tok)) m.specials.insert(tok);
  return m;
}

}  // namespace attnlab
