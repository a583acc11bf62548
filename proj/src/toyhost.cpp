#include "saekit/toyhost.hpp"

#include <cstring>

namespace saekit {

// ----------------------------- init & io -----------------------------

ToyLm toy_lm_random_init(const ToyLmConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double std) {
    MatF m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<float>(std * rng.normal());
    return m;
  };
  const int D = cfg.d_model, F = cfg.d_ff, V = cfg.vocab;
  ToyLm lm;
  lm.cfg = cfg;
  // embed rows have unit norm in expectation (scaled by sqrt(D) in the
  // forward pass); unembed keeps initial logits near zero
  lm.embed = gaussian(V, D, 1.0 / std::sqrt(D));
  // sinusoidal start for the positions: adjacent rows are strongly related,
  // which makes local attention patterns easy to pick up; trained afterwards
  lm.pos_embed.resize(cfg.max_seq, D);
  for (int t = 0; t < cfg.max_seq; ++t) {
    for (int i = 0; i < D; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / D);
      lm.pos_embed(t, i) = static_cast<float>(std::sin(t * freq));
      if (i + 1 < D) lm.pos_embed(t, i + 1) = static_cast<float>(std::cos(t * freq));
    }
  }
  lm.layers.resize(cfg.layers);
  for (auto& L : lm.layers) {
    L.g_pre_attn = VecF::Ones(D);
    L.g_post_attn = VecF::Ones(D);
    L.g_pre_mlp = VecF::Ones(D);
    L.g_post_mlp = VecF::Ones(D);
    L.wq = gaussian(D, D, 1.0 / std::sqrt(D));
    L.wk = gaussian(D, D, 1.0 / std::sqrt(D));
    L.wv = gaussian(D, D, 1.0 / std::sqrt(D));
    L.wo = gaussian(D, D, 1.0 / std::sqrt(D));
    L.w1 = gaussian(D, F, 1.0 / std::sqrt(D));
    L.w2 = gaussian(F, D, 1.0 / std::sqrt(F));
  }
  lm.g_final = VecF::Ones(D);
  lm.unembed = gaussian(D, V, 0.32 / std::sqrt(D));
  return lm;
}

namespace {

constexpr char kLmMagic[4] = {'T', 'L', 'M', 'W'};
constexpr uint32_t kLmVersion = 1;

void put_mat(std::string& out, const MatF& m) {
  size_t off = out.size();
  out.resize(off + sizeof(float) * m.size());
  std::memcpy(out.data() + off, m.data(), sizeof(float) * m.size());
}
void put_vec(std::string& out, const VecF& v) {
  size_t off = out.size();
  out.resize(off + sizeof(float) * v.size());
  std::memcpy(out.data() + off, v.data(), sizeof(float) * v.size());
}
void get_block(const std::string& in, size_t& off, float* dst, size_t count,
               const std::filesystem::path& path) {
  if (off + count * 4 > in.size()) throw IoError("truncated toy LM file: " + path.string());
  std::memcpy(dst, in.data() + off, count * 4);
  off += count * 4;
}

}  // namespace

void save_toy_lm(const std::filesystem::path& path, const ToyLm& lm) {
  std::string out;
  out.append(kLmMagic, 4);
  put_u32(out, kLmVersion);
  put_u32(out, static_cast<uint32_t>(lm.cfg.vocab));
  put_u32(out, static_cast<uint32_t>(lm.cfg.d_model));
  put_u32(out, static_cast<uint32_t>(lm.cfg.layers));
  put_u32(out, static_cast<uint32_t>(lm.cfg.heads));
  put_u32(out, static_cast<uint32_t>(lm.cfg.head_dim));
  put_u32(out, static_cast<uint32_t>(lm.cfg.d_ff));
  put_u32(out, static_cast<uint32_t>(lm.cfg.max_seq));
  put_mat(out, lm.embed);
  put_mat(out, lm.pos_embed);
  for (const auto& L : lm.layers) {
    put_vec(out, L.g_pre_attn);
    put_mat(out, L.wq);
    put_mat(out, L.wk);
    put_mat(out, L.wv);
    put_mat(out, L.wo);
    put_vec(out, L.g_post_attn);
    put_vec(out, L.g_pre_mlp);
    put_mat(out, L.w1);
    put_mat(out, L.w2);
    put_vec(out, L.g_post_mlp);
  }
  put_vec(out, lm.g_final);
  put_mat(out, lm.unembed);
  atomic_write_file(path, out);
}

ToyLm load_toy_lm(const std::filesystem::path& path) {
  std::string in = read_file(path);
  if (in.size() < 36 || std::memcmp(in.data(), kLmMagic, 4) != 0) {
    throw IoError("not a toy LM file: " + path.string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(in.data());
  if (get_u32(p + 4) != kLmVersion) throw IoError("unsupported toy LM version: " + path.string());
  ToyLmConfig cfg;
  cfg.vocab = static_cast<int>(get_u32(p + 8));
  cfg.d_model = static_cast<int>(get_u32(p + 12));
  cfg.layers = static_cast<int>(get_u32(p + 16));
  cfg.heads = static_cast<int>(get_u32(p + 20));
  cfg.head_dim = static_cast<int>(get_u32(p + 24));
  cfg.d_ff = static_cast<int>(get_u32(p + 28));
  cfg.max_seq = static_cast<int>(get_u32(p + 32));
  cfg.validate();

  ToyLm lm;
  lm.cfg = cfg;
  const int D = cfg.d_model, F = cfg.d_ff, V = cfg.vocab;
  lm.embed.resize(V, D);
  lm.pos_embed.resize(cfg.max_seq, D);
  size_t off = 36;
  get_block(in, off, lm.embed.data(), static_cast<size_t>(V) * D, path);
  get_block(in, off, lm.pos_embed.data(), static_cast<size_t>(cfg.max_seq) * D, path);
  lm.layers.resize(cfg.layers);
  for (auto& L : lm.layers) {
    L.g_pre_attn.resize(D);
    L.wq.resize(D, D);
    L.wk.resize(D, D);
    L.wv.resize(D, D);
    L.wo.resize(D, D);
    L.g_post_attn.resize(D);
    L.g_pre_mlp.resize(D);
    L.w1.resize(D, F);
    L.w2.resize(F, D);
    L.g_post_mlp.resize(D);
    get_block(in, off, L.g_pre_attn.data(), D, path);
    get_block(in, off, L.wq.data(), static_cast<size_t>(D) * D, path);
    get_block(in, off, L.wk.data(), static_cast<size_t>(D) * D, path);
    get_block(in, off, L.wv.data(), static_cast<size_t>(D) * D, path);
    get_block(in, off, L.wo.data(), static_cast<size_t>(D) * D, path);
    get_block(in, off, L.g_post_attn.data(), D, path);
    get_block(in, off, L.g_pre_mlp.data(), D, path);
    get_block(in, off, L.w1.data(), static_cast<size_t>(D) * F, path);
    get_block(in, off, L.w2.data(), static_cast<size_t>(F) * D, path);
    get_block(in, off, L.g_post_mlp.data(), D, path);
  }
  lm.g_final.resize(D);
  lm.unembed.resize(D, V);
  get_block(in, off, lm.g_final.data(), D, path);
  get_block(in, off, lm.unembed.data(), static_cast<size_t>(D) * V, path);
  if (off != in.size()) throw IoError("trailing bytes in toy LM file: " + path.string());
  return lm;
}

// ----------------------------- corpus -----------------------------

ToyCorpus generate_markov_corpus(int symbols, int64_t num_sequences, int seq_len, uint64_t seed) {
  if (symbols < 2 || symbols > 253) throw ConfigError("corpus: symbols must be in [2, 253]");
  if (seq_len < 4) throw ConfigError("corpus: seq_len must be >= 4");
  if (num_sequences < 1) throw ConfigError("corpus: need at least one sequence");

  // order-2 transition table: each context allows only a handful of
  // successors, keeping the source entropy well below log(symbols)
  Rng table_rng(mix_seed(seed, 0xC0E0));
  const int K = symbols;
  const int branching = std::min(4, K);
  std::vector<double> cumulative(static_cast<size_t>(K) * K * K, 0.0);
  std::vector<int> candidates(static_cast<size_t>(K));
  for (int a = 0; a < K; ++a) {
    for (int b = 0; b < K; ++b) {
      double* row = &cumulative[(static_cast<size_t>(a) * K + b) * K];
      for (int c = 0; c < K; ++c) candidates[static_cast<size_t>(c)] = c;
      table_rng.shuffle(candidates.begin(), candidates.end());
      std::vector<double> weights(static_cast<size_t>(K), 0.0);
      double total = 0;
      for (int j = 0; j < branching; ++j) {
        const double u = table_rng.uniform(0.2, 1.0);
        weights[static_cast<size_t>(candidates[static_cast<size_t>(j)])] = u * u;
        total += u * u;
      }
      double acc = 0;
      for (int c = 0; c < K; ++c) {
        acc += weights[c] / total;
        row[c] = acc;
      }
    }
  }

  Rng rng(mix_seed(seed, 1));
  ToyCorpus corpus;
  corpus.vocab_total = static_cast<uint16_t>(symbols + kTokFirstSymbol);
  corpus.seq_len = static_cast<uint32_t>(seq_len);
  corpus.sequences.reserve(static_cast<size_t>(num_sequences));
  for (int64_t s = 0; s < num_sequences; ++s) {
    std::vector<uint16_t> seq(static_cast<size_t>(seq_len));
    seq.front() = kTokBos;
    seq.back() = kTokEos;
    int a = static_cast<int>(rng.below(static_cast<uint64_t>(K)));
    int b = static_cast<int>(rng.below(static_cast<uint64_t>(K)));
    for (int t = 1; t + 1 < seq_len; ++t) {
      const double* row = &cumulative[(static_cast<size_t>(a) * K + b) * K];
      const double u = rng.uniform();
      int c = 0;
      while (c + 1 < K && row[c] <= u) ++c;
      seq[static_cast<size_t>(t)] = static_cast<uint16_t>(c + kTokFirstSymbol);
      a = b;
      b = c;
    }
    corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

namespace {
constexpr char kCorpusMagic[4] = {'T', 'C', 'R', 'P'};
}

void save_corpus(const std::filesystem::path& path, const ToyCorpus& corpus) {
  std::string out;
  out.append(kCorpusMagic, 4);
  put_u32(out, 1);
  put_u16(out, corpus.vocab_total);
  put_u32(out, static_cast<uint32_t>(corpus.sequences.size()));
  put_u32(out, corpus.seq_len);
  for (const auto& seq : corpus.sequences) {
    if (seq.size() != corpus.seq_len) throw ConfigError("corpus: ragged sequence");
    for (uint16_t t : seq) put_u16(out, t);
  }
  atomic_write_file(path, out);
}

ToyCorpus load_corpus(const std::filesystem::path& path) {
  std::string in = read_file(path);
  if (in.size() < 18 || std::memcmp(in.data(), kCorpusMagic, 4) != 0) {
    throw IoError("not a corpus file: " + path.string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(in.data());
  if (get_u32(p + 4) != 1) throw IoError("unsupported corpus version: " + path.string());
  ToyCorpus corpus;
  corpus.vocab_total = get_u16(p + 8);
  const uint32_t num = get_u32(p + 10);
  corpus.seq_len = get_u32(p + 14);
  const uint64_t want = 18ull + 2ull * num * corpus.seq_len;
  if (in.size() != want) throw IoError("corrupt corpus file: " + path.string());
  corpus.sequences.resize(num);
  size_t off = 18;
  for (auto& seq : corpus.sequences) {
    seq.resize(corpus.seq_len);
    for (auto& t : seq) {
      t = get_u16(p + off);
      off += 2;
    }
  }
  return corpus;
}

// ----------------------------- host training -----------------------------

namespace {

// minimal Adam state over the toy LM weight set
struct HostAdam {
  ToyLmGradsT<float> m, v;
  int64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit HostAdam(const ToyLm& lm)
      : m(ToyLmGradsT<float>::zeros_like(lm)), v(ToyLmGradsT<float>::zeros_like(lm)) {}

  template <class W, class G>
  void update_one(W& w, G& mg, G& vg, const G& g, double lr) {
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double gi = g.data()[i];
      const double mi = beta1 * mg.data()[i] + (1 - beta1) * gi;
      const double vi = beta2 * vg.data()[i] + (1 - beta2) * gi * gi;
      mg.data()[i] = static_cast<float>(mi);
      vg.data()[i] = static_cast<float>(vi);
      const double mhat = mi / (1 - std::pow(beta1, static_cast<double>(t)));
      const double vhat = vi / (1 - std::pow(beta2, static_cast<double>(t)));
      w.data()[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }

  void step(ToyLm& lm, const ToyLmGradsT<float>& g, double lr) {
    ++t;
    update_one(lm.embed, m.embed, v.embed, g.embed, lr);
    update_one(lm.pos_embed, m.pos_embed, v.pos_embed, g.pos_embed, lr);
    for (size_t l = 0; l < lm.layers.size(); ++l) {
      auto& L = lm.layers[l];
      auto& ml = m.layers[l];
      auto& vl = v.layers[l];
      const auto& gl = g.layers[l];
      update_one(L.g_pre_attn, ml.g_pre_attn, vl.g_pre_attn, gl.g_pre_attn, lr);
      update_one(L.g_post_attn, ml.g_post_attn, vl.g_post_attn, gl.g_post_attn, lr);
      update_one(L.g_pre_mlp, ml.g_pre_mlp, vl.g_pre_mlp, gl.g_pre_mlp, lr);
      update_one(L.g_post_mlp, ml.g_post_mlp, vl.g_post_mlp, gl.g_post_mlp, lr);
      update_one(L.wq, ml.wq, vl.wq, gl.wq, lr);
      update_one(L.wk, ml.wk, vl.wk, gl.wk, lr);
      update_one(L.wv, ml.wv, vl.wv, gl.wv, lr);
      update_one(L.wo, ml.wo, vl.wo, gl.wo, lr);
      update_one(L.w1, ml.w1, vl.w1, gl.w1, lr);
      update_one(L.w2, ml.w2, vl.w2, gl.w2, lr);
    }
    update_one(lm.g_final, m.g_final, v.g_final, g.g_final, lr);
    update_one(lm.unembed, m.unembed, v.unembed, g.unembed, lr);
  }
};

}  // namespace

double held_out_loss(const ToyLm& lm, const ToyCorpus& corpus, int64_t max_sequences) {
  // held-out slice: the last max_sequences sequences
  const int64_t total = static_cast<int64_t>(corpus.sequences.size());
  const int64_t use = std::min(max_sequences, total);
  double sum = 0;
  int64_t count = 0;
  ToyLmCacheT<float> cache;
  for (int64_t s = total - use; s < total; ++s) {
    const auto& seq = corpus.sequences[static_cast<size_t>(s)];
    toy_forward<float>(lm, seq, cache);
    auto loss = lm_cross_entropy<float>(cache.logits, seq);
    sum += loss.mean * static_cast<double>(loss.count);
    count += loss.count;
  }
  if (count == 0) throw ConfigError("held_out_loss: no countable positions");
  return sum / static_cast<double>(count);
}

ToyTrainResult train_toy_lm(ToyLm& lm, const ToyCorpus& corpus, const ToyTrainConfig& cfg) {
  if (corpus.sequences.size() < 16) throw ConfigError("train_toy_lm: corpus too small");
  if (corpus.vocab_total > lm.cfg.vocab) {
    throw ConfigError("train_toy_lm: corpus vocabulary exceeds the model's");
  }
  // train on everything except the held-out tail
  const int64_t held_out = std::min<int64_t>(64, static_cast<int64_t>(corpus.sequences.size()) / 8);
  const int64_t train_seqs = static_cast<int64_t>(corpus.sequences.size()) - held_out;

  ToyTrainResult result;
  result.initial_loss = held_out_loss(lm, corpus);

  HostAdam adam(lm);
  ToyLmCacheT<float> cache;
  int64_t cursor = 0;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    auto grads = ToyLmGradsT<float>::zeros_like(lm);
    double batch_loss = 0;
    int64_t batch_count = 0;
    for (int64_t i = 0; i < cfg.sequences_per_step; ++i) {
      const auto& seq = corpus.sequences[static_cast<size_t>(cursor)];
      cursor = (cursor + 1) % train_seqs;
      toy_forward<float>(lm, seq, cache);
      const Eigen::Index S = cache.logits.rows();
      // CE over all next-token positions except padding
      MatR<float> d_logits = MatR<float>::Zero(S, lm.cfg.vocab);
      for (Eigen::Index t = 0; t + 1 < S; ++t) {
        if (seq[static_cast<size_t>(t + 1)] == kTokPad) continue;
        VecX<double> row = cache.logits.row(t).cast<double>();
        const double mx = row.maxCoeff();
        VecX<double> prob = (row.array() - mx).exp();
        prob /= prob.sum();
        batch_loss += -std::log(std::max(prob(seq[static_cast<size_t>(t + 1)]), 1e-300));
        ++batch_count;
        d_logits.row(t) = prob.cast<float>().transpose();
        d_logits(t, seq[static_cast<size_t>(t + 1)]) -= 1.0f;
      }
      toy_backward<float>(lm, cache, d_logits, &grads);
    }
    // scale to the mean over counted positions
    const float inv = 1.0f / static_cast<float>(batch_count);
    auto scale_all = [&](ToyLmGradsT<float>& g) {
      g.embed *= inv;
      g.pos_embed *= inv;
      for (auto& gl : g.layers) {
        gl.g_pre_attn *= inv;
        gl.g_post_attn *= inv;
        gl.g_pre_mlp *= inv;
        gl.g_post_mlp *= inv;
        gl.wq *= inv;
        gl.wk *= inv;
        gl.wv *= inv;
        gl.wo *= inv;
        gl.w1 *= inv;
        gl.w2 *= inv;
      }
      g.g_final *= inv;
      g.unembed *= inv;
    };
    scale_all(grads);
    adam.step(lm, grads, cfg.lr);

    if (!std::isfinite(batch_loss)) {
      throw NumericError("train_toy_lm: loss diverged at step " + std::to_string(step));
    }
  }

  result.final_loss = held_out_loss(lm, corpus);
  if (!std::isfinite(result.final_loss)) {
    throw NumericError("train_toy_lm: non-finite held-out loss");
  }
  return result;
}

}  // namespace saekit
