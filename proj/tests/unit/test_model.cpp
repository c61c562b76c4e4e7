#include <doctest.h>

#include <cmath>

#include "mposm/checkpoint.hpp"
#include "mposm/model.hpp"

using namespace mposm;

namespace {

Corpus tiny_corpus() {
  std::vector<Sentence> s = {
      {{"ab", "cd", "ef", "gh"}, std::nullopt},
      {{"cd", "ab", "ij"}, std::nullopt},
      {{"kl", "ef", "ab", "cd", "ij", "gh"}, std::nullopt},
      {{"ij", "kl"}, std::nullopt},
  };
  return Corpus("tiny", std::move(s));
}

ModelConfig tiny_config(int n_tags = 3) {
  ModelConfig c;
  c.n_tags = n_tags;
  c.word_emb_dim = 4;
  c.pos_emb_dim = 5;
  c.char_emb_dim = 3;
  c.hidden_dim = 4;
  c.dropout = 0.0;
  return c;
}

double finite_difference_error(Model& model, const std::function<double()>& loss,
                               const std::function<void()>& backward,
                               const std::function<bool(const std::string&)>& include, double h = 1e-6) {
  model.params().zero_grad();
  backward();
  double worst = 0.0;
  for (auto* p : model.params().all()) {
    if (!include(p->name)) continue;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + h;
      const double up = loss();
      p->value.data()[i] = orig - h;
      const double down = loss();
      p->value.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p->grad.data()[i];
      const double err = std::abs(numeric - analytic) / std::max(1e-3, std::abs(numeric) + std::abs(analytic));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("config validation names offending fields") {
  auto c = tiny_config();
  CHECK(c.validate().empty());
  c.mask_rate = 1.5;
  c.gumbel_tau = 0;
  auto errors = c.validate();
  REQUIRE(errors.size() == 2);
  CHECK(errors[0].find("model.mask_rate") != std::string::npos);
  CHECK(errors[1].find("model.gumbel_tau") != std::string::npos);
  CHECK(ContextSpec::parse("width:2").width == 2);
  CHECK(ContextSpec::parse("full").kind == ContextKind::full);
  CHECK_THROWS(ContextSpec::parse("wide"));
  auto j = tiny_config().to_json();
  CHECK(ModelConfig::from_json(j) == tiny_config());
}

TEST_CASE("Gumbel-max sampling matches softmax probabilities") {
  // Oracle: P(argmax(l + g) = 0) = e / (e + 1) for logits [1, 0].
  Rng rng(2024);
  const int n = 100000;
  Matrix noise = sample_gumbel(2, n, rng);
  Graph g;
  Matrix logits(2, n);
  logits.row(0).setConstant(1.0);
  logits.row(1).setZero();
  Matrix hard = ad::gumbel_straight_through(g.constant(logits), noise, 2.0).value();
  const double freq = hard.row(0).sum() / n;
  CHECK(std::abs(freq - std::exp(1.0) / (std::exp(1.0) + 1.0)) < 0.01);
  CHECK(hard.colwise().sum().isApproxToConstant(1.0));
  CHECK(noise.allFinite());
}

TEST_CASE("mask sampling: forced minimum and masked fraction") {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) CHECK(sample_mask(1, 0.15, rng)[0] == 1);
  // Oracle: E[#masked] = L p + (1 - p)^L, one forced position when none is drawn.
  const std::size_t L = 20;
  const double p = 0.15;
  const double expected = (L * p + std::pow(1 - p, L)) / L;
  double total = 0.0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    auto m = sample_mask(L, p, rng);
    int k = 0;
    for (auto x : m) k += x;
    CHECK_FALSE(k == 0);
    total += static_cast<double>(k) / L;
  }
  CHECK(std::abs(total / draws - expected) < 0.002);
  CHECK(std::abs(total / draws - 0.15) < 0.01);
  Rng a(9), b(9);
  CHECK(sample_mask(30, 0.3, a) == sample_mask(30, 0.3, b));
}

TEST_CASE("word representations: shape and context independence") {
  auto corpus = tiny_corpus();
  Rng rng(3);
  Model model(tiny_config(), Vocabulary::build(corpus), rng);
  auto data = model.encode(corpus);
  Matrix w = model.encode_words(data, 2);
  CHECK(w.rows() == 4 + 2 * 2);
  // "ab" is at position 0 of sentence 0 and position 2 of sentence 2.
  Matrix w0 = model.encode_words(data, 0);
  CHECK(w0.col(0) == w.col(2));
  Matrix l0 = model.local_logits(data, 0), l2 = model.local_logits(data, 2);
  CHECK(l0.col(0) == l2.col(2));
  CHECK(l0.allFinite());
  Matrix p = model.local_probability_table();
  CHECK((p.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("bayes-tied emission equals a brute-force Bayes table") {
  auto corpus = tiny_corpus();
  Rng rng(5);
  Model model(tiny_config(4), Vocabulary::build(corpus), rng);
  Matrix pzx = model.local_probability_table();
  Matrix table = model.emission_table();
  const auto& vocab = model.vocab();
  for (int z = 0; z < 4; ++z) {
    double denom = 0.0;
    for (int x = 0; x < static_cast<int>(vocab.size()); ++x) denom += pzx(z, x) * vocab.probability(x);
    double row = 0.0;
    for (int x = 0; x < static_cast<int>(vocab.size()); ++x) {
      const double brute = pzx(z, x) * vocab.probability(x) / denom;
      CHECK(std::abs(table(z, x) - brute) < 1e-8);
      row += table(z, x);
    }
    CHECK(std::abs(row - 1.0) < 1e-6);
  }
}

TEST_CASE("bayes-tied emission on a hand-computed two-word example") {
  // P(x1) = 0.75, P(x2) = 0.25, P(z=1|x1) = 0.8, P(z=1|x2) = 0.4
  // => P(x1|z=1) = 0.6 / 0.7.
  Corpus c("two", {Sentence{{"x1", "x1", "x1", "x2"}, std::nullopt}});
  ModelConfig cfg = tiny_config(2);
  cfg.word_emb_dim = 1;
  Rng rng(1);
  Model model(cfg, Vocabulary::build(c), rng);
  auto& w = model.params().at("local.0.weight").value;
  w.setZero();
  w(0, 0) = 1.0;  // tag-1 logit reads the word embedding; tag 2 stays at 0
  model.params().at("local.0.bias").value.setZero();
  auto& emb = model.params().at("word_emb").value;
  emb(0, 0) = std::log(0.8 / 0.2);
  emb(0, 1) = std::log(0.4 / 0.6);
  Matrix t = model.emission_table();
  CHECK(t(0, 0) == doctest::Approx(0.6 / 0.7).epsilon(1e-12));
  CHECK(t(0, 1) == doctest::Approx(0.1 / 0.7).epsilon(1e-12));
  CHECK(t(1, 0) == doctest::Approx(0.15 / 0.30).epsilon(1e-12));
}

TEST_CASE("uniform P(z|x) and P(x) give a uniform emission") {
  Corpus c("u", {Sentence{{"a", "b", "c", "d"}, std::nullopt}});
  Rng rng(1);
  Model model(tiny_config(3), Vocabulary::build(c), rng);
  model.params().at("local.0.weight").value.setZero();
  Matrix t = model.emission_table();
  CHECK((t.array() - 0.25).abs().maxCoeff() < 1e-12);
}

TEST_CASE("bayes-tied emission smooths a vanishing denominator") {
  auto corpus = tiny_corpus();
  Rng rng(5);
  Model model(tiny_config(3), Vocabulary::build(corpus), rng);
  model.params().at("local.0.bias").value(2, 0) = -1000.0;
  Matrix t = model.emission_table();
  CHECK(model.smoothing_events() == 1);
  CHECK(t.allFinite());
  CHECK((t.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("word marginal is normalized over the vocabulary") {
  auto corpus = tiny_corpus();
  for (auto emission : {EmissionKind::bayes_tied, EmissionKind::feedforward}) {
    for (auto context : {ContextSpec{ContextKind::full, 1}, ContextSpec{ContextKind::width, 1}}) {
      auto cfg = tiny_config();
      cfg.emission = emission;
      cfg.context = context;
      Rng rng(8);
      Model model(cfg, Vocabulary::build(corpus), rng);
      // Vary the masked word over the whole vocabulary (plus one unseen word
      // for the feedforward head, which scores unk) and sum P(x_j | C_j).
      const auto& vocab = model.vocab();
      std::vector<std::string> candidates = vocab.words();
      if (emission == EmissionKind::feedforward) candidates.push_back("zz");
      double total = 0.0;
      for (const auto& x : candidates) {
        Corpus probe("p", {Sentence{{"ab", "cd", x, "gh", "ij"}, std::nullopt}});
        auto data = model.encode(probe);
        MaskPattern m{0, 0, 1, 0, 0};
        total += std::exp(model.masked_word_logprob(data, 0, m)(0, 0));
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("log-space marginal equals direct-space computation") {
  auto corpus = tiny_corpus();
  for (auto emission : {EmissionKind::bayes_tied, EmissionKind::feedforward}) {
    auto cfg = tiny_config();
    cfg.emission = emission;
    Rng rng(12);
    Model model(cfg, Vocabulary::build(corpus), rng);
    auto data = model.encode(corpus);
    auto tags = model.predict_tags(data);
    Matrix emit = model.emission_table();
    for (std::size_t s = 0; s < data.size(); ++s) {
      MaskPattern m(data.word_ids[s].size(), 0);
      m[0] = 1;
      if (m.size() > 1) m.back() = 1;
      Matrix pz = model.reconstruct_tag_distribution(tags.tags[s], m);
      Matrix lp = model.masked_word_logprob(data, s, m);
      int k = 0;
      for (std::size_t j = 0; j < m.size(); ++j) {
        if (!m[j]) continue;
        double direct = 0.0;
        for (int z = 0; z < cfg.n_tags; ++z) direct += emit(z, data.word_ids[s][j]) * pz(z, k);
        CHECK(std::abs(std::log(direct) - lp(0, k)) < 1e-8);
        CHECK(std::abs(pz.col(k).sum() - 1.0) < 1e-6);
        ++k;
      }
    }
  }
}

TEST_CASE("degenerate marginal reduces to the emission") {
  // P(z|C) = [0.5, 0.5], P(x|z) = [0.2, 0.4] -> 0.3.
  Graph g;
  Matrix lz(2, 1), le(2, 1);
  lz << std::log(0.5), std::log(0.5);
  le << std::log(0.2), std::log(0.4);
  double v = std::exp(ad::logsumexp_cols(g.constant(lz) + g.constant(le)).value()(0, 0));
  CHECK(v == doctest::Approx(0.3).epsilon(1e-12));
  lz << 0.0, -std::numeric_limits<double>::infinity();
  v = std::exp(ad::logsumexp_cols(g.constant(lz) + g.constant(le)).value()(0, 0));
  CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("relaxed-path gradients match finite differences") {
  auto corpus = tiny_corpus();
  for (auto emission : {EmissionKind::bayes_tied, EmissionKind::feedforward}) {
    for (auto context : {ContextSpec{ContextKind::full, 1}, ContextSpec{ContextKind::width, 2}}) {
      auto cfg = tiny_config();
      cfg.emission = emission;
      cfg.context = context;
      Rng rng(31);
      Model model(cfg, Vocabulary::build(corpus), rng);
      auto data = model.encode(corpus);
      std::vector<std::size_t> batch{0, 1, 2, 3};
      Rng noise_rng(4);
      StepInputs in = model.sample_step_inputs(data, batch, noise_rng, true);
      in.dropout = false;
      in.relaxed = true;
      auto loss = [&] {
        Graph g;
        return model.forward(g, data, batch, in).loss.scalar();
      };
      auto backward = [&] {
        Graph g;
        auto r = model.forward(g, data, batch, in);
        g.backward(r.loss);
      };
      CHECK(finite_difference_error(model, loss, backward, [](const std::string&) { return true; }) < 1e-4);
    }
  }
}

TEST_CASE("straight-through path: exact gradients for weights after the discretization") {
  auto corpus = tiny_corpus();
  auto cfg = tiny_config();
  cfg.emission = EmissionKind::feedforward;
  Rng rng(41);
  Model model(cfg, Vocabulary::build(corpus), rng);
  auto data = model.encode(corpus);
  std::vector<std::size_t> batch{0, 1, 2, 3};
  Rng noise_rng(6);
  StepInputs in = model.sample_step_inputs(data, batch, noise_rng, true);
  in.dropout = false;
  auto loss = [&] {
    Graph g;
    return model.forward(g, data, batch, in).loss.scalar();
  };
  auto backward = [&] {
    Graph g;
    auto r = model.forward(g, data, batch, in);
    g.backward(r.loss);
  };
  auto downstream = [](const std::string& n) {
    return n.rfind("tag_emb", 0) == 0 || n.rfind("emit.", 0) == 0 || n.rfind("rec.", 0) == 0 ||
           n.rfind("dep.", 0) == 0;
  };
  CHECK(finite_difference_error(model, loss, backward, downstream) < 1e-4);
  // The local predictor still receives a (surrogate) gradient.
  CHECK(model.params().at("local.0.weight").grad.norm() > 0.0);
}

TEST_CASE("width-k reconstruction ignores tags beyond k") {
  auto corpus = tiny_corpus();
  for (int k : {1, 2}) {
    auto cfg = tiny_config();
    cfg.context = {ContextKind::width, k};
    Rng rng(7);
    Model model(cfg, Vocabulary::build(corpus), rng);
    std::vector<int> tags{0, 1, 2, 0, 1, 2, 0, 1, 2};
    MaskPattern m(9, 0);
    m[4] = 1;
    Matrix base = model.reconstruct_tag_distribution(tags, m);
    Rng r(1);
    for (int trial = 0; trial < 50; ++trial) {
      auto t = tags;
      for (int j = 0; j < 9; ++j) {
        if (std::abs(j - 4) > k) t[static_cast<std::size_t>(j)] = static_cast<int>(r() % 3);
      }
      CHECK(model.reconstruct_tag_distribution(t, m) == base);
    }
    auto near = tags;
    near[static_cast<std::size_t>(4 - k)] = (near[static_cast<std::size_t>(4 - k)] + 1) % 3;
    CHECK_FALSE(model.reconstruct_tag_distribution(near, m).isApprox(base, 1e-12));
  }
}

TEST_CASE("full-context reconstruction sees distant tags") {
  auto corpus = tiny_corpus();
  Rng rng(7);
  Model model(tiny_config(), Vocabulary::build(corpus), rng);
  std::vector<int> tags{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1};
  MaskPattern m(tags.size(), 0);
  m[0] = 1;
  Matrix base = model.reconstruct_tag_distribution(tags, m);
  auto far = tags;
  far[5] = (far[5] + 1) % 3;
  Matrix changed = model.reconstruct_tag_distribution(far, m);
  CHECK((changed - base).cwiseAbs().maxCoeff() > 1e-9);
  CHECK(std::abs(base.sum() - 1.0) < 1e-6);
}

TEST_CASE("masked positions see only the MASK embedding") {
  auto corpus = tiny_corpus();
  Rng rng(7);
  Model model(tiny_config(), Vocabulary::build(corpus), rng);
  MaskPattern m{0, 1, 0, 0};
  Matrix a = model.reconstruct_tag_distribution(std::vector<int>{0, 0, 1, 2}, m);
  Matrix b = model.reconstruct_tag_distribution(std::vector<int>{0, 2, 1, 2}, m);
  CHECK(a == b);
}

TEST_CASE("predict_tags: per-type, in range, deterministic, order-invariant") {
  auto corpus = tiny_corpus();
  Rng rng(2);
  Model model(tiny_config(), Vocabulary::build(corpus), rng);
  auto data = model.encode(corpus);
  auto t1 = model.predict_tags(data);
  auto t2 = model.predict_tags(data);
  CHECK(t1.tags == t2.tags);
  CHECK(t1.source == TagSource::local_argmax);
  std::map<std::string, int> by_word;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    REQUIRE(t1.tags[s].size() == corpus[s].size());
    for (std::size_t i = 0; i < corpus[s].size(); ++i) {
      const int t = t1.tags[s][i];
      CHECK(t >= 0);
      CHECK(t < 3);
      auto [it, inserted] = by_word.emplace(corpus[s].words[i], t);
      CHECK(it->second == t);
    }
  }
  std::vector<Sentence> rev(corpus.sentences().rbegin(), corpus.sentences().rend());
  auto rdata = model.encode(Corpus("rev", rev));
  auto rt = model.predict_tags(rdata);
  for (std::size_t s = 0; s < corpus.size(); ++s) CHECK(rt.tags[corpus.size() - 1 - s] == t1.tags[s]);
}

TEST_CASE("predict_tags breaks argmax ties toward the lowest id") {
  auto corpus = tiny_corpus();
  Rng rng(2);
  Model model(tiny_config(), Vocabulary::build(corpus), rng);
  model.params().at("local.0.weight").value.setZero();
  model.params().at("local.0.bias").value.setZero();
  for (const auto& s : model.predict_tags(model.encode(corpus)).tags) {
    for (int t : s) CHECK(t == 0);
  }
}

TEST_CASE("unseen words keep their character features") {
  auto corpus = tiny_corpus();
  Rng rng(2);
  Model model(tiny_config(), Vocabulary::build(corpus), rng);
  Corpus probe("p", {Sentence{{"zzz", "qq", "ab"}, std::nullopt}});
  auto data = model.encode(probe);
  CHECK(data.word_ids[0][0] == model.vocab().unk_id());
  CHECK(data.word_ids[0][1] == model.vocab().unk_id());
  Matrix w = model.encode_words(data, 0);
  CHECK(w.col(0).head(4) == w.col(1).head(4));
  CHECK_FALSE(w.col(0).tail(4).isApprox(w.col(1).tail(4)));
}

TEST_CASE("padding contributes nothing to the loss") {
  auto corpus = tiny_corpus();
  for (auto context : {ContextSpec{ContextKind::full, 1}, ContextSpec{ContextKind::width, 1}}) {
    auto cfg = tiny_config();
    cfg.context = context;
    Rng rng(13);
    Model model(cfg, Vocabulary::build(corpus), rng);
    auto data = model.encode(corpus);
    MaskPattern m3{1, 0, 1};
    MaskPattern m6{0, 1, 0, 0, 1, 1};
    std::vector<std::size_t> alone{1}, other{2}, both{1, 2};
    StepInputs a, b, ab;
    a.masks = {m3};
    b.masks = {m6};
    ab.masks = {m3, m6};
    Graph g;
    Matrix la = model.forward(g, data, alone, a).masked_logprob.value();
    Matrix lb = model.forward(g, data, other, b).masked_logprob.value();
    auto rab = model.forward(g, data, both, ab);
    Matrix lab = rab.masked_logprob.value();
    REQUIRE(lab.cols() == 5);
    CHECK(std::abs(lab(0, 0) - la(0, 0)) < 1e-12);
    CHECK(std::abs(lab(0, 1) - la(0, 1)) < 1e-12);
    CHECK(std::abs(lab(0, 2) - lb(0, 0)) < 1e-12);
    CHECK(std::abs(lab(0, 4) - lb(0, 2)) < 1e-12);
    CHECK(std::abs(rab.loss.scalar() + lab.sum() / 5.0) < 1e-12);
  }
}

TEST_CASE("single masked position: loss is its negative log-likelihood") {
  auto corpus = tiny_corpus();
  Rng rng(13);
  Model model(tiny_config(), Vocabulary::build(corpus), rng);
  auto data = model.encode(corpus);
  StepInputs in;
  in.masks = {MaskPattern{0, 0, 1, 0}};
  std::vector<std::size_t> batch{0};
  Graph g;
  auto r = model.forward(g, data, batch, in);
  CHECK(r.loss.scalar() == doctest::Approx(-r.masked_logprob.value()(0, 0)));
  CHECK(r.loss.scalar() > 0.0);
}

TEST_CASE("MLMP head is a normalized distribution over words") {
  auto corpus = tiny_corpus();
  auto cfg = tiny_config();
  cfg.variant = ModelVariant::mlmp_pretrain;
  Rng rng(3);
  Model model(cfg, Vocabulary::build(corpus), rng);
  CHECK_FALSE(model.params().contains("rec.out.weight"));
  std::vector<std::string> candidates = model.vocab().words();
  candidates.push_back("unseen");
  double total = 0.0;
  for (const auto& x : candidates) {
    Corpus probe("p", {Sentence{{"ab", x, "cd"}, std::nullopt}});
    total += std::exp(model.masked_word_logprob(model.encode(probe), 0, MaskPattern{0, 1, 0})(0, 0));
  }
  CHECK(std::abs(total - 1.0) < 1e-6);
}

TEST_CASE("transplanted tensors are bit-identical") {
  auto corpus = tiny_corpus();
  auto vocab = Vocabulary::build(corpus);
  auto cfg = tiny_config();
  auto mcfg = cfg;
  mcfg.variant = ModelVariant::mlmp_pretrain;
  Rng r1(1), r2(2);
  Model mlmp(mcfg, vocab, r1);
  Model model(cfg, vocab, r2);
  const auto copied = transplant_shared(mlmp, model);
  CHECK(copied > 5);
  for (const auto* p : model.params().all()) {
    if (!Model::is_shared_parameter(p->name)) continue;
    const auto& src = mlmp.params().at(p->name).value;
    CHECK(std::memcmp(src.data(), p->value.data(), sizeof(double) * static_cast<std::size_t>(src.size())) == 0);
  }
  CHECK(model.params().contains("rec.out.weight"));
}

TEST_CASE("word variant tags come from reconstruction") {
  auto corpus = tiny_corpus();
  auto cfg = tiny_config();
  cfg.variant = ModelVariant::word_variant;
  cfg.emission = EmissionKind::feedforward;
  Rng rng(3);
  Model model(cfg, Vocabulary::build(corpus), rng);
  auto data = model.encode(corpus);
  auto tags = model.predict_tags(data);
  CHECK(tags.source == TagSource::reconstruction_argmax);
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    CHECK(tags.tags[s].size() == corpus[s].size());
    for (int t : tags.tags[s]) CHECK(t < cfg.n_tags);
  }
  std::vector<std::size_t> batch{0, 1, 2, 3};
  Rng r(1);
  auto in = model.sample_step_inputs(data, batch, r, true);
  Graph g;
  CHECK(std::isfinite(model.forward(g, data, batch, in).loss.scalar()));

  auto bad = cfg;
  bad.emission = EmissionKind::bayes_tied;
  CHECK_FALSE(bad.validate().empty());
}

TEST_CASE("pretrained embeddings tie the output layer") {
  auto corpus = tiny_corpus();
  auto vocab = Vocabulary::build(corpus);
  Rng rng(1);
  auto table = parse_pretrained_embeddings("ab 1 2 3\ncd 4 5 6\n", vocab, rng);
  auto cfg = with_pretrained_defaults(tiny_config(), table.dimension);
  Model model(cfg, vocab, rng, &table);
  CHECK(model.params().at("word_emb").value(1, vocab.id("cd")) == 5.0);
  CHECK(model.params().contains("local.1.weight"));
  CHECK(model.params().contains("emit.out.bias"));
  CHECK_FALSE(model.params().contains("emit.out.weight"));
  Matrix e = model.emission_table();
  CHECK((e.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("checkpoint round-trip is bit-identical and guards the vocabulary") {
  auto corpus = tiny_corpus();
  Rng rng(5);
  Model model(tiny_config(), Vocabulary::build(corpus), rng);
  Adam adam(1e-3);
  {
    auto data = model.encode(corpus);
    std::vector<std::size_t> batch{0, 1};
    auto in = model.sample_step_inputs(data, batch, rng, true);
    Graph g;
    auto r = model.forward(g, data, batch, in);
    model.params().zero_grad();
    g.backward(r.loss);
    adam.step(model.params());
  }
  nlohmann::json state = {{"note", "x"}, {"value", 0.1}};
  auto bytes = serialize_checkpoint(model, &adam, &rng, 3, state);
  auto ck = deserialize_checkpoint(bytes, model.vocab().hash());
  REQUIRE(ck.optimizer);
  Rng restored = rng_from_state(ck.rng_state);
  auto again = serialize_checkpoint(*ck.model, &*ck.optimizer, &restored, ck.epoch, ck.train_state);
  CHECK(again == bytes);
  CHECK(ck.epoch == 3);
  CHECK(restored() == rng());
  CHECK(ck.model->predict_tags(ck.model->encode(corpus)).tags == model.predict_tags(model.encode(corpus)).tags);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes, model.vocab().hash() + 1), CheckpointError);
  CHECK_THROWS_AS(deserialize_checkpoint("garbage bytes here, not a checkpoint"), CheckpointError);
  auto corrupt = bytes;
  corrupt[8] = 9;
  CHECK_THROWS_AS(deserialize_checkpoint(corrupt), CheckpointError);
}
