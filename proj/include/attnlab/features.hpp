#pragma once

// Acoustic front end: 16-bit PCM wav in, 40-dim MFCC frames out.
// Pipeline: pre-emphasis -> 25ms/10ms Hamming frames (no padding) ->
// power spectrum via radix-2 FFT (zero-padded to the next power of two) ->
// 64 triangular mel filters spanning 0..Nyquist -> floored natural log ->
// orthonormal DCT-II keeping coefficients 0..39.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "attnlab/io.hpp"
#include "attnlab/tensor.hpp"

namespace attnlab {

struct Wav {
  uint32_t sample_rate = 0;
  std::vector<real> samples;  // mono, scaled to [-1, 1)
};

inline Wav read_wav(const std::string& path) {
  std::string data = read_file(path);
  bin::Reader r(data, "wav " + path);
  if (r.bytes(4) != "RIFF") throw FormatError("wav " + path + ": missing RIFF header");
  r.u32();  // riff size, not trusted
  if (r.bytes(4) != "WAVE") throw FormatError("wav " + path + ": not a WAVE file");

  bool have_fmt = false;
  uint16_t channels = 0, bits = 0, format = 0;
  uint32_t rate = 0;
  Wav wav;
  bool have_data = false;
  while (!r.eof()) {
    if (r.remaining() < 8) break;  // trailing junk
    std::string id = r.bytes(4);
    uint32_t size = r.u32();
    if (id == "fmt ") {
      if (size < 16) throw FormatError("wav " + path + ": fmt chunk too small");
      format = r.u16();
      channels = r.u16();
      rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      bits = r.u16();
      r.skip(size - 16);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("wav " + path + ": data chunk before fmt");
      if (format != 1) throw FormatError("wav " + path + ": only PCM supported");
      if (channels != 1) throw FormatError("wav " + path + ": only mono supported");
      if (bits != 16) throw FormatError("wav " + path + ": only 16-bit samples supported");
      if (size % 2 != 0) throw FormatError("wav " + path + ": odd data chunk size");
      wav.samples.reserve(size / 2);
      for (uint32_t i = 0; i < size / 2; ++i) wav.samples.push_back(r.i16() / 32768.0);
      have_data = true;
    } else {
      r.skip(size);
    }
    if (size % 2 == 1 && !r.eof()) r.skip(1);  // chunks are word-aligned
  }
  if (!have_fmt || !have_data) throw FormatError("wav " + path + ": missing fmt or data chunk");
  wav.sample_rate = rate;
  return wav;
}

inline void write_wav(const std::string& path, const Wav& wav) {
  std::string body;
  for (real s : wav.samples) {
    real clipped = std::clamp(s, -1.0, 32767.0 / 32768.0);
    bin::put_i16(body, static_cast<int16_t>(std::lround(clipped * 32768.0)));
  }
  std::string out;
  out += "RIFF";
  bin::put_u32(out, 36 + static_cast<uint32_t>(body.size()));
  out += "WAVE";
  out += "fmt ";
  bin::put_u32(out, 16);
  bin::put_u16(out, 1);  // PCM
  bin::put_u16(out, 1);  // mono
  bin::put_u32(out, wav.sample_rate);
  bin::put_u32(out, wav.sample_rate * 2);
  bin::put_u16(out, 2);
  bin::put_u16(out, 16);
  out += "data";
  bin::put_u32(out, static_cast<uint32_t>(body.size()));
  out += body;
  write_file(path, out);
}

// ---------------------------------------------------------------------------

struct MfccConfig {
  real window_ms = 25.0;
  real hop_ms = 10.0;
  size_t num_filters = 64;
  size_t num_coeffs = 40;
  real preemphasis = 0.97;
  real log_floor = 1e-10;
  bool mean_subtract = false;  // per-utterance mean removal on the coefficients
};

inline real hz_to_mel(real hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline real mel_to_hz(real mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// frames of length `window` every `hop` samples, no padding
inline size_t frame_count(size_t n, size_t window, size_t hop) {
  if (n < window) return 0;
  return 1 + (n - window) / hop;
}

inline size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p *= 2;
  return p;
}

// iterative radix-2 decimation-in-time; length must be a power of two
inline void fft_radix2(std::vector<std::complex<real>>& a) {
  size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw DimError("fft_radix2: length must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    real ang = -2.0 * M_PI / static_cast<real>(len);
    std::complex<real> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<real> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<real> u = a[i + k];
        std::complex<real> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// triangular filters on a mel-uniform grid over [0, sample_rate/2];
// returns num_filters rows of (nfft/2 + 1) weights
inline std::vector<std::vector<real>> mel_filterbank(size_t num_filters, size_t nfft, real sample_rate) {
  size_t bins = nfft / 2 + 1;
  real mel_max = hz_to_mel(sample_rate / 2.0);
  std::vector<real> pts(num_filters + 2);
  for (size_t i = 0; i < pts.size(); ++i) pts[i] = mel_to_hz(mel_max * static_cast<real>(i) / static_cast<real>(num_filters + 1));
  std::vector<std::vector<real>> fb(num_filters, std::vector<real>(bins, 0.0));
  for (size_t m = 0; m < num_filters; ++m) {
    real l = pts[m], c = pts[m + 1], r = pts[m + 2];
    for (size_t k = 0; k < bins; ++k) {
      real f = static_cast<real>(k) * sample_rate / static_cast<real>(nfft);
      if (f > l && f < c)
        fb[m][k] = (f - l) / (c - l);
      else if (f >= c && f < r)
        fb[m][k] = (r - f) / (r - c);
    }
  }
  return fb;
}

// filter center frequencies in Hz (the apex of each triangle)
inline std::vector<real> mel_filter_centers(size_t num_filters, real sample_rate) {
  real mel_max = hz_to_mel(sample_rate / 2.0);
  std::vector<real> centers(num_filters);
  for (size_t m = 0; m < num_filters; ++m)
    centers[m] = mel_to_hz(mel_max * static_cast<real>(m + 1) / static_cast<real>(num_filters + 1));
  return centers;
}

// orthonormal DCT-II: row j of the full num_filters x num_filters matrix,
// truncated to the first num_coeffs rows
inline std::vector<std::vector<real>> dct_matrix(size_t num_coeffs, size_t num_filters) {
  std::vector<std::vector<real>> d(num_coeffs, std::vector<real>(num_filters));
  for (size_t j = 0; j < num_coeffs; ++j) {
    real scale = j == 0 ? std::sqrt(1.0 / static_cast<real>(num_filters)) : std::sqrt(2.0 / static_cast<real>(num_filters));
    for (size_t m = 0; m < num_filters; ++m)
      d[j][m] = scale * std::cos(M_PI * static_cast<real>(j) * (static_cast<real>(m) + 0.5) / static_cast<real>(num_filters));
  }
  return d;
}

// feature matrix that can legitimately be empty (waveform shorter than one window)
struct Features {
  size_t frames = 0;
  size_t dim = 0;
  std::vector<real> data;  // frames x dim, row-major

  real at(size_t t, size_t d_) const { return data.at(t * dim + d_); }

  Tensor tensor() const {
    if (frames == 0) throw FormatError("empty feature sequence");
    return Tensor::from({frames, dim}, data);
  }
};

inline Features compute_mfcc(const Wav& wav, const MfccConfig& cfg = {}) {
  if (wav.sample_rate < 8000) throw FormatError("mfcc: sample rate must be at least 8000 Hz");
  size_t window = static_cast<size_t>(wav.sample_rate * cfg.window_ms / 1000.0);
  size_t hop = static_cast<size_t>(wav.sample_rate * cfg.hop_ms / 1000.0);
  size_t T = frame_count(wav.samples.size(), window, hop);
  Features out;
  out.frames = T;
  out.dim = cfg.num_coeffs;
  if (T == 0) return out;

  std::vector<real> emph(wav.samples.size());
  for (size_t i = 0; i < wav.samples.size(); ++i)
    emph[i] = wav.samples[i] - cfg.preemphasis * (i > 0 ? wav.samples[i - 1] : 0.0);

  std::vector<real> hamming(window);
  for (size_t i = 0; i < window; ++i)
    hamming[i] = 0.54 - 0.46 * std::cos(2.0 * M_PI * static_cast<real>(i) / static_cast<real>(window - 1));

  size_t nfft = next_pow2(window);
  auto fb = mel_filterbank(cfg.num_filters, nfft, static_cast<real>(wav.sample_rate));
  auto dct = dct_matrix(cfg.num_coeffs, cfg.num_filters);

  out.data.assign(T * cfg.num_coeffs, 0.0);
  std::vector<std::complex<real>> buf(nfft);
  std::vector<real> power(nfft / 2 + 1), mel(cfg.num_filters);
  for (size_t t = 0; t < T; ++t) {
    size_t off = t * hop;
    for (size_t i = 0; i < nfft; ++i)
      buf[i] = i < window ? std::complex<real>(emph[off + i] * hamming[i], 0.0) : std::complex<real>(0.0, 0.0);
    fft_radix2(buf);
    for (size_t k = 0; k <= nfft / 2; ++k) power[k] = std::norm(buf[k]);
    for (size_t m = 0; m < cfg.num_filters; ++m) {
      real acc = 0.0;
      for (size_t k = 0; k <= nfft / 2; ++k) acc += fb[m][k] * power[k];
      mel[m] = std::log(std::max(acc, cfg.log_floor));
    }
    for (size_t j = 0; j < cfg.num_coeffs; ++j) {
      real acc = 0.0;
      for (size_t m = 0; m < cfg.num_filters; ++m) acc += dct[j][m] * mel[m];
      out.data[t * cfg.num_coeffs + j] = acc;
    }
  }

  if (cfg.mean_subtract) {
    for (size_t j = 0; j < cfg.num_coeffs; ++j) {
      real mean = 0.0;
      for (size_t t = 0; t < T; ++t) mean += out.data[t * cfg.num_coeffs + j];
      mean /= static_cast<real>(T);
      for (size_t t = 0; t < T; ++t) out.data[t * cfg.num_coeffs + j] -= mean;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// feature cache: "ATFEAT01", u32 frame count, u32 dim, frames*dim LE f32

constexpr char kFeatureMagic[] = "ATFEAT01";

inline void write_feature_cache(const std::string& path, const Features& f) {
  std::string out(kFeatureMagic, 8);
  bin::put_u32(out, static_cast<uint32_t>(f.frames));
  bin::put_u32(out, static_cast<uint32_t>(f.dim));
  for (real v : f.data) bin::put_f32(out, static_cast<float>(v));
  write_file(path, out);
}

inline Features read_feature_cache(const std::string& path) {
  std::string data = read_file(path);
  bin::Reader r(data, "feature cache " + path);
  if (r.bytes(8) != std::string(kFeatureMagic, 8))
    throw FormatError("feature cache " + path + ": bad magic");
  Features f;
  f.frames = r.u32();
  f.dim = r.u32();
  f.data.resize(f.frames * f.dim);
  for (real& v : f.data) v = r.f32();
  if (!r.eof()) throw FormatError("feature cache " + path + ": trailing bytes");
  return f;
}

}  // namespace attnlab
