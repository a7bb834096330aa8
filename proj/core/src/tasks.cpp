// SPDX-License-Identifier: Apache-2.0
#include "fanformer/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace fanformer {

void Vocab::add(char c) {
  if (char_to_id.count(c)) return;
  char_to_id[c] = static_cast<int>(id_to_char.size());
  id_to_char.push_back(c);
}

int Vocab::encode_char(char c) const {
  auto it = char_to_id.find(c);
  if (it == char_to_id.end())
    throw InputError(std::string("vocab: unknown character '") + c + "'");
  return it->second;
}

std::vector<int> Vocab::encode(const std::string& s) const {
  std::vector<int> out;
  out.reserve(s.size());
  for (char c : s) out.push_back(encode_char(c));
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_char.size())
      throw InputError("vocab: id " + std::to_string(id) + " out of range");
    out.push_back(id_to_char[static_cast<std::size_t>(id)]);
  }
  return out;
}

std::string TaskDataset::prompt_of(const Sample& s) const {
  return vocab.decode({s.tokens.begin(), s.tokens.begin() + static_cast<long>(s.answer_start)});
}

std::string TaskDataset::answer_of(const Sample& s) const {
  return vocab.decode({s.tokens.begin() + static_cast<long>(s.answer_start), s.tokens.end()});
}

namespace {

Vocab arithmetic_vocab() {
  Vocab v;
  for (char c : std::string("0123456789+=(), ")) v.add(c);
  return v;
}

Sample make_sample(const Vocab& vocab, const std::string& prompt,
                   const std::string& answer, int a, int b, long long c) {
  Sample s;
  std::vector<int> p = vocab.encode(prompt);
  std::vector<int> ans = vocab.encode(answer);
  s.tokens = p;
  s.tokens.insert(s.tokens.end(), ans.begin(), ans.end());
  s.answer_start = p.size();
  s.a = a;
  s.b = b;
  s.c = c;
  return s;
}

void check_token_coverage(const TaskDataset& d) {
  std::set<int> all, train;
  for (const Sample& s : d.samples)
    all.insert(s.tokens.begin(), s.tokens.end());
  for (std::size_t i : d.train_idx) {
    const Sample& s = d.samples[i];
    train.insert(s.tokens.begin(), s.tokens.end());
  }
  std::string missing;
  for (int t : all)
    if (!train.count(t)) missing += d.vocab.id_to_char[static_cast<std::size_t>(t)];
  if (!missing.empty())
    throw SplitError("split leaves tokens unseen in training: '" + missing + "'");
}

}  // namespace

TaskDataset gen_mod_function(int modulus, int domain_size, double train_fraction,
                             std::uint64_t seed, bool regression) {
  if (modulus < 2) throw InputError("gen_mod_function: modulus must be >= 2");
  if (domain_size < modulus)
    throw InputError("gen_mod_function: domain_size " + std::to_string(domain_size) +
                     " smaller than modulus " + std::to_string(modulus));
  TaskDataset d;
  d.kind = TaskKind::mod_fn;
  d.modulus = modulus;
  d.regression = regression;
  Vocab v;
  for (char c : std::string("0123456789=")) v.add(c);
  d.vocab = v;
  for (int x = 0; x < domain_size; ++x) {
    std::string prompt = std::to_string(x) + "=";
    std::string answer = std::to_string(x % modulus);
    d.samples.push_back(make_sample(v, prompt, answer, x, 0, x % modulus));
  }
  std::vector<std::size_t> order(d.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto cut = static_cast<std::size_t>(train_fraction * static_cast<double>(order.size()));
  d.train_idx.assign(order.begin(), order.begin() + static_cast<long>(cut));
  d.test_idx.assign(order.begin() + static_cast<long>(cut), order.end());
  std::sort(d.train_idx.begin(), d.train_idx.end());
  std::sort(d.test_idx.begin(), d.test_idx.end());
  check_token_coverage(d);
  return d;
}

TaskDataset gen_modular_addition() {
  constexpr int kModulus = 113;
  TaskDataset d;
  d.kind = TaskKind::mod_add;
  d.vocab = arithmetic_vocab();
  for (int a = 0; a < kModulus; ++a)
    for (int b = 0; b < kModulus; ++b) {
      long long c = (a + b) % kModulus;
      std::string prompt = std::to_string(a) + " + " + std::to_string(b) + "=";
      d.samples.push_back(make_sample(d.vocab, prompt, std::to_string(c), a, b, c));
    }
  d.train_idx.resize(d.samples.size());
  std::iota(d.train_idx.begin(), d.train_idx.end(), 0);
  return d;
}

TaskDataset gen_linear_regression() {
  constexpr int kDomain = 100;  // c = a + 2b + 3
  TaskDataset d;
  d.kind = TaskKind::lin_reg;
  d.vocab = arithmetic_vocab();
  for (int a = 0; a < kDomain; ++a)
    for (int b = 0; b < kDomain; ++b) {
      long long c = a + 2LL * b + 3;
      std::string prompt = "(" + std::to_string(a) + ", " + std::to_string(b) + ")=";
      d.samples.push_back(make_sample(d.vocab, prompt, std::to_string(c), a, b, c));
    }
  d.train_idx.resize(d.samples.size());
  std::iota(d.train_idx.begin(), d.train_idx.end(), 0);
  return d;
}

void leave_square_out(TaskDataset& dataset, int center_a, int center_b, int side) {
  if (side < 0) throw InputError("leave_square_out: negative side");
  double half = static_cast<double>(side) / 2.0;
  dataset.train_idx.clear();
  dataset.test_idx.clear();
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    bool inside = std::abs(s.a - center_a) <= half && std::abs(s.b - center_b) <= half;
    (inside ? dataset.test_idx : dataset.train_idx).push_back(i);
  }
  dataset.square = SquareSplit{center_a, center_b, side};
  check_token_coverage(dataset);
}

std::vector<int> TextDataset::window(std::size_t w) const {
  auto begin = tokens.begin() + static_cast<long>(w * seq_len);
  return {begin, begin + static_cast<long>(seq_len + 1)};
}

TextDataset text_corpus_from_string(const std::string& text, std::size_t seq_len) {
  if (text.empty()) throw InputError("text corpus is empty");
  if (seq_len == 0) throw InputError("seq_len must be positive");
  TextDataset d;
  d.seq_len = seq_len;
  for (char c : text) d.vocab.add(c);
  d.tokens.reserve(text.size());
  for (char c : text) d.tokens.push_back(d.vocab.encode_char(c));
  std::size_t windows = (text.size() - 1) / seq_len;
  for (std::size_t w = 0; w < windows; ++w) {
    if (w % 20 == 19)
      d.val_windows.push_back(w);
    else
      d.train_windows.push_back(w);
  }
  return d;
}

TextDataset load_text_corpus(const std::filesystem::path& path, std::size_t seq_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open corpus file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return text_corpus_from_string(ss.str(), seq_len);
}

void export_jsonl(const TaskDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open output file " + path.string());
  std::vector<char> split(dataset.samples.size(), '?');
  for (std::size_t i : dataset.train_idx) split[i] = 't';
  for (std::size_t i : dataset.test_idx) split[i] = 'e';
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    nlohmann::json j = {{"prompt", dataset.prompt_of(s)},
                        {"answer", dataset.answer_of(s)},
                        {"split", split[i] == 'e' ? "test" : "train"},
                        {"a", s.a},
                        {"b", s.b}};
    out << j.dump() << '\n';
  }
}

}  // namespace fanformer
