#include "p2r/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <unordered_map>

namespace p2r {

namespace {

std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

double unit_double(std::mt19937_64& rng) { return (rng() >> 11) * 0x1.0p-53; }

void fisher_yates(std::vector<std::uint32_t>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(bounded(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

Tokenizer Tokenizer::byte_level() {
  Tokenizer t;
  t.byte_mode_ = true;
  t.n_base_ = 256;
  return t;
}

Tokenizer Tokenizer::from_vocab_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("I/O error: cannot open vocabulary file " + path);
  Tokenizer t;
  t.byte_mode_ = false;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    t.max_entry_len_ = std::max(t.max_entry_len_, static_cast<int>(line.size()));
    t.entries_.push_back(line);
  }
  if (t.entries_.empty()) throw std::runtime_error("data error: empty vocabulary file " + path);
  t.n_base_ = static_cast<int>(t.entries_.size());
  return t;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  if (byte_mode_) {
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
  }
  std::unordered_map<std::string_view, int> lut;
  lut.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (!entries_[i].empty()) lut.emplace(entries_[i], static_cast<int>(i));
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t max_len = std::min(static_cast<std::size_t>(max_entry_len_),
                                         text.size() - pos);
    int match = -1;
    std::size_t match_len = 0;
    for (std::size_t len = max_len; len >= 1; --len) {
      auto it = lut.find(std::string_view(text).substr(pos, len));
      if (it != lut.end()) {
        match = it->second;
        match_len = len;
        break;
      }
    }
    if (match < 0)
      throw std::runtime_error("data error: text contains out-of-vocabulary symbol at byte " +
                               std::to_string(pos));
    ids.push_back(match);
    pos += match_len;
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) throw std::out_of_range("decode: id out of range");
    if (id >= n_base_) continue;  // specials have no text form
    if (byte_mode_)
      out.push_back(static_cast<char>(id));
    else
      out += entries_[static_cast<std::size_t>(id)];
  }
  return out;
}

SequenceStream SequenceStream::take_eval_split(std::size_t n) {
  if (n >= sequences.size())
    throw std::invalid_argument("take_eval_split: split larger than stream");
  SequenceStream eval;
  eval.seq_len = seq_len;
  eval.sequences.assign(sequences.end() - static_cast<std::ptrdiff_t>(n), sequences.end());
  sequences.resize(sequences.size() - n);
  return eval;
}

SequenceStream ingest_corpus(const std::string& path, int seq_len, const Tokenizer& tokenizer,
                             std::uint64_t seed) {
  if (seq_len <= 0) throw std::invalid_argument("ingest_corpus: seq_len must be positive");
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  std::error_code ec;
  if (fs::is_directory(path, ec)) {
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::is_regular_file(path, ec)) {
    files.push_back(path);
  } else {
    throw std::runtime_error("I/O error: cannot read corpus path " + path);
  }

  SequenceStream stream;
  stream.seq_len = seq_len;
  for (const auto& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("I/O error: cannot open " + file.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.empty()) continue;
    const std::vector<int> tokens = tokenizer.encode(text);
    for (std::size_t off = 0; off < tokens.size(); off += static_cast<std::size_t>(seq_len)) {
      std::vector<int> seq(static_cast<std::size_t>(seq_len), tokenizer.pad_id());
      const std::size_t n = std::min(tokens.size() - off, static_cast<std::size_t>(seq_len));
      std::copy(tokens.begin() + static_cast<std::ptrdiff_t>(off),
                tokens.begin() + static_cast<std::ptrdiff_t>(off + n), seq.begin());
      stream.sequences.push_back(std::move(seq));
    }
  }
  if (stream.sequences.empty()) throw std::runtime_error("data error: empty corpus at " + path);

  std::vector<std::uint32_t> order(stream.sequences.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint32_t>(i);
  fisher_yates(order, splitmix(seed ^ 0x636f7270757321ull));
  std::vector<std::vector<int>> shuffled(order.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    shuffled[i] = std::move(stream.sequences[order[i]]);
  stream.sequences = std::move(shuffled);
  return stream;
}

int Batch::mask_count() const {
  int n = 0;
  for (std::uint8_t m : mask) n += (m != 0);
  return n;
}

Batch make_lm_batch(const std::vector<const std::vector<int>*>& rows, int pad_id) {
  if (rows.empty()) throw std::invalid_argument("make_lm_batch: no rows");
  Batch b;
  b.batch = static_cast<int>(rows.size());
  b.seq = static_cast<int>(rows[0]->size());
  b.task = TaskTag::LM;
  b.input.reserve(static_cast<std::size_t>(b.batch) * b.seq);
  b.target.assign(static_cast<std::size_t>(b.batch) * b.seq, pad_id);
  b.mask.assign(static_cast<std::size_t>(b.batch) * b.seq, 0);
  for (int r = 0; r < b.batch; ++r) {
    const std::vector<int>& row = *rows[static_cast<std::size_t>(r)];
    if (static_cast<int>(row.size()) != b.seq)
      throw std::invalid_argument("make_lm_batch: ragged rows");
    b.input.insert(b.input.end(), row.begin(), row.end());
    for (int t = 0; t + 1 < b.seq; ++t) {
      const std::size_t at = static_cast<std::size_t>(r) * b.seq + t;
      if (row[static_cast<std::size_t>(t)] != pad_id &&
          row[static_cast<std::size_t>(t) + 1] != pad_id) {
        b.target[at] = row[static_cast<std::size_t>(t) + 1];
        b.mask[at] = 1;
      }
    }
  }
  return b;
}

Batch make_denoise_batch(const std::vector<const std::vector<int>*>& rows, int pad_id,
                         int sentinel_id, float corrupt_ratio, double mean_span,
                         std::uint64_t rng_seed) {
  if (rows.empty()) throw std::invalid_argument("make_denoise_batch: no rows");
  if (!(corrupt_ratio > 0.0f) || !(corrupt_ratio < 0.5f))
    throw std::invalid_argument("make_denoise_batch: corrupt_ratio must lie in (0, 0.5)");
  if (mean_span < 1.0) throw std::invalid_argument("make_denoise_batch: mean_span must be >= 1");
  Batch b;
  b.batch = static_cast<int>(rows.size());
  b.seq = static_cast<int>(rows[0]->size());
  b.task = TaskTag::DENOISE;
  b.input.reserve(static_cast<std::size_t>(b.batch) * b.seq);
  b.target.assign(static_cast<std::size_t>(b.batch) * b.seq, pad_id);
  b.mask.assign(static_cast<std::size_t>(b.batch) * b.seq, 0);
  std::mt19937_64 rng(rng_seed);
  const double p = 1.0 / mean_span;
  std::vector<std::uint8_t> corrupted;
  for (int r = 0; r < b.batch; ++r) {
    const std::vector<int>& row = *rows[static_cast<std::size_t>(r)];
    if (static_cast<int>(row.size()) != b.seq)
      throw std::invalid_argument("make_denoise_batch: ragged rows");
    b.input.insert(b.input.end(), row.begin(), row.end());
    int nonpad = 0;
    while (nonpad < b.seq && row[static_cast<std::size_t>(nonpad)] != pad_id) ++nonpad;
    const int want = static_cast<int>(std::llround(static_cast<double>(corrupt_ratio) * nonpad));
    corrupted.assign(static_cast<std::size_t>(b.seq), 0);
    int have = 0;
    int attempts = 0;
    const int max_attempts = 16 * (want + 1);
    while (have < want && attempts < max_attempts) {
      ++attempts;
      int len = 1;
      if (p < 1.0) {
        const double u = unit_double(rng);
        len = 1 + static_cast<int>(std::log1p(-u) / std::log1p(-p));
      }
      len = std::min(len, want - have);
      if (len < 1) len = 1;
      const int start = static_cast<int>(bounded(rng, static_cast<std::uint64_t>(nonpad)));
      if (start + len > nonpad) continue;
      bool clash = false;
      for (int i = start; i < start + len; ++i)
        if (corrupted[static_cast<std::size_t>(i)]) {
          clash = true;
          break;
        }
      if (clash) continue;
      for (int i = start; i < start + len; ++i) corrupted[static_cast<std::size_t>(i)] = 1;
      have += len;
    }
    for (int t = 0; t < nonpad; ++t) {
      if (!corrupted[static_cast<std::size_t>(t)]) continue;
      const std::size_t at = static_cast<std::size_t>(r) * b.seq + t;
      b.target[at] = row[static_cast<std::size_t>(t)];
      b.input[at] = sentinel_id;
      b.mask[at] = 1;
    }
  }
  return b;
}

BatchStream::BatchStream(const SequenceStream& stream, int pad_id, int sentinel_id,
                         BatchSettings settings)
    : stream_(&stream), pad_id_(pad_id), sentinel_id_(sentinel_id), settings_(settings) {
  if (stream.sequences.empty()) throw std::invalid_argument("batch stream: empty sequence stream");
  if (settings_.batch_size <= 0) throw std::invalid_argument("batch stream: batch_size must be > 0");
  if (settings_.lm_cycle < 0 || settings_.denoise_cycle < 0 ||
      settings_.lm_cycle + settings_.denoise_cycle == 0)
    throw std::invalid_argument("batch stream: task cycle must be non-empty");
}

void BatchStream::ensure_epoch(std::uint64_t epoch) {
  if (epoch == epoch_) return;
  order_.resize(stream_->sequences.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<std::uint32_t>(i);
  if (epoch > 0) fisher_yates(order_, splitmix(settings_.seed ^ (0xe70c4000ull + epoch)));
  epoch_ = epoch;
}

TaskTag BatchStream::task_for(std::uint64_t index) const {
  const std::uint64_t cycle =
      static_cast<std::uint64_t>(settings_.lm_cycle) + settings_.denoise_cycle;
  return (index % cycle) < static_cast<std::uint64_t>(settings_.lm_cycle) ? TaskTag::LM
                                                                          : TaskTag::DENOISE;
}

Batch BatchStream::next() {
  const std::uint64_t n = stream_->sequences.size();
  std::vector<const std::vector<int>*> rows;
  rows.reserve(static_cast<std::size_t>(settings_.batch_size));
  for (int j = 0; j < settings_.batch_size; ++j) {
    const std::uint64_t g = cursor_ * settings_.batch_size + static_cast<std::uint64_t>(j);
    ensure_epoch(g / n);
    rows.push_back(&stream_->sequences[order_[static_cast<std::size_t>(g % n)]]);
  }
  Batch b;
  if (task_for(cursor_) == TaskTag::LM) {
    b = make_lm_batch(rows, pad_id_);
  } else {
    b = make_denoise_batch(rows, pad_id_, sentinel_id_, settings_.corrupt_ratio,
                           settings_.mean_span, splitmix(settings_.seed ^ (cursor_ * 2 + 1)));
  }
  ++cursor_;
  return b;
}

void BatchStream::seek(std::uint64_t batch_index) { cursor_ = batch_index; }

}  // namespace p2r
