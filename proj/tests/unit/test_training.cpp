#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mposm/checkpoint.hpp"
#include "mposm/eval.hpp"
#include "mposm/synthdata.hpp"
#include "mposm/training.hpp"

using namespace mposm;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_tags = 6;
  c.word_emb_dim = 8;
  c.pos_emb_dim = 8;
  c.char_emb_dim = 4;
  c.hidden_dim = 8;
  c.context = {ContextKind::width, 1};
  return c;
}

TrainConfig small_train(int epochs) {
  TrainConfig t;
  t.max_epochs = epochs;
  t.batch_size = 40;
  t.learning_rate = 5e-3;
  return t;
}

const Corpus& d0_corpus() {
  static const Corpus c = synth::generate_dataset({synth::Variant::D0, 400, 5, 3});
  return c;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / "mposm_unit" / name;
  fs::remove_all(d);
  return d;
}

RunRecord make_record(std::vector<std::pair<double, double>> m1_and_loss) {
  RunRecord r;
  int epoch = 0;
  for (auto [m1, loss] : m1_and_loss) {
    EpochRecord e;
    e.epoch = ++epoch;
    e.m1 = m1;
    e.eval_loss = loss;
    r.epochs.push_back(e);
  }
  return r;
}

}  // namespace

TEST_CASE("model selection by oracle and by loss, ties to the earliest epoch") {
  auto r = make_record({{90, 2.0}, {95, 1.5}, {95, 1.5}, {80, 1.7}});
  CHECK(select_model(r, SelectionMode::oracle) == 1);
  CHECK(select_model(r, SelectionMode::loss) == 1);
  CHECK(selected_m1(r, SelectionMode::oracle) == 95.0);
  auto r2 = make_record({{100, 1.9}, {70, 1.2}});
  CHECK(selected_m1(r2, SelectionMode::oracle) == 100.0);
  CHECK(selected_m1(r2, SelectionMode::loss) == 70.0);
  CHECK_THROWS(select_model(RunRecord{}, SelectionMode::loss));
  CHECK(parse_selection_mode("loss") == SelectionMode::loss);
  CHECK_THROWS(parse_selection_mode("best"));
}

TEST_CASE("aggregate over seeds") {
  std::vector<SeedSummary> runs;
  std::uint64_t seed = 0;
  for (double m : {100.0, 100.0, 100.0, 100.0, 90.0}) runs.push_back({++seed, m, m - 5, {}});
  auto a = aggregate(runs, SelectionMode::oracle);
  CHECK(a.mean == doctest::Approx(98.0));
  CHECK(a.percent_perfect == doctest::Approx(80.0));
  auto l = aggregate(runs, SelectionMode::loss);
  CHECK(l.mean == doctest::Approx(93.0));
  CHECK(l.percent_perfect == 0.0);
  CHECK(a.to_json().at("n_runs") == 5);
  CHECK(a.to_csv().rfind("seed,oracle_m1,loss_m1,epochs,wall_seconds\n", 0) == 0);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  CHECK(t.validate().empty());
  t.learning_rate = -1;
  t.batch_size = 0;
  auto e = t.validate();
  REQUIRE(e.size() == 2);
  CHECK(e[0].find("train.learning_rate") != std::string::npos);
  CHECK(e[1].find("train.batch_size") != std::string::npos);
  CHECK(TrainConfig::from_json(TrainConfig{}.to_json()).to_json() == TrainConfig{}.to_json());
}

TEST_CASE("derived random streams are independent and reproducible") {
  auto a = derive_rng(1, 0), b = derive_rng(1, 0), c = derive_rng(1, 1), d = derive_rng(2, 0);
  const auto x = a();
  CHECK(x == b());
  CHECK(x != c());
  CHECK(x != d());
}

TEST_CASE("length-bucketed batches cover every sentence once") {
  Rng rng(4);
  Model model(small_config(), Vocabulary::build(d0_corpus()), rng);
  auto data = model.encode(d0_corpus());
  auto batches = make_batches(data, 40, rng);
  std::vector<int> seen(data.size(), 0);
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& b : batches) {
    CHECK(b.size() <= 40);
    std::size_t lo = SIZE_MAX, hi = 0;
    for (auto i : b) {
      ++seen[i];
      lo = std::min(lo, data.word_ids[i].size());
      hi = std::max(hi, data.word_ids[i].size());
    }
    spans.emplace_back(lo, hi);
  }
  // Batches are cut from the length-sorted order, so their length ranges do not overlap.
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 0; i + 1 < spans.size(); ++i) CHECK(spans[i].second <= spans[i + 1].first);
  CHECK(std::all_of(seen.begin(), seen.end(), [](int n) { return n == 1; }));
}

TEST_CASE("evaluation loss is deterministic") {
  Rng rng(4);
  Model model(small_config(), Vocabulary::build(d0_corpus()), rng);
  auto data = model.encode(d0_corpus());
  auto masks = evaluation_masks(data, 0.15, 7);
  CHECK(masks == evaluation_masks(data, 0.15, 7));
  const double a = evaluation_loss(model, data, masks, 40);
  CHECK(a == evaluation_loss(model, data, masks, 17));
  CHECK(a > 0.0);
}

TEST_CASE("MLMP loss decreases over 100 steps") {
  auto cfg = small_config();
  cfg.variant = ModelVariant::mlmp_pretrain;
  Rng rng(1);
  Model model(cfg, Vocabulary::build(d0_corpus()), rng);
  auto data = model.encode(d0_corpus());
  auto masks = evaluation_masks(data, cfg.mask_rate, 3);
  const double before = evaluation_loss(model, data, masks, 40);
  Adam adam(5e-3);
  for (int step = 0; step < 100; ++step) {
    auto batches = make_batches(data, 40, rng);
    const auto& batch = batches[static_cast<std::size_t>(step) % batches.size()];
    auto in = model.sample_step_inputs(data, batch, rng, true);
    Graph g;
    auto res = model.forward(g, data, batch, in);
    model.params().zero_grad();
    g.backward(res.loss);
    adam.step(model.params());
  }
  CHECK(evaluation_loss(model, data, masks, 40) < before);
}

TEST_CASE("training: loss falls early, runs are deterministic, oracle selection dominates") {
  auto run = [] {
    Rng rng = derive_rng(1, 1);
    Model model(small_config(), Vocabulary::build(d0_corpus()), rng);
    return train(model, d0_corpus(), d0_corpus(), small_train(4));
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.epochs.size() == 4);
  CHECK(a.stop_reason == "max_epochs");
  CHECK(a.epochs[1].eval_loss < a.epochs[0].eval_loss);
  CHECK(a.epochs[2].eval_loss < a.epochs[1].eval_loss);
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    CHECK(a.epochs[i].train_loss == b.epochs[i].train_loss);
    CHECK(a.epochs[i].eval_loss == b.epochs[i].eval_loss);
    CHECK(a.epochs[i].m1 == b.epochs[i].m1);
    CHECK(*a.epochs[i].m1 >= 0.0);
  }
  CHECK(selected_m1(a, SelectionMode::oracle) >= selected_m1(a, SelectionMode::loss));
}

TEST_CASE("learning rate decays on stagnation and training stops") {
  Rng rng(2);
  Model model(small_config(), Vocabulary::build(d0_corpus()), rng);
  auto t = small_train(10);
  t.stagnation_threshold = 0.99;  // no epoch after the first counts as an improvement
  t.stagnation_patience = 1;
  auto r = train(model, d0_corpus(), d0_corpus(), t);
  REQUIRE(r.epochs.size() == 4);
  CHECK(r.stop_reason == "stagnated");
  CHECK(r.epochs[0].learning_rate == doctest::Approx(5e-3));
  CHECK(r.epochs[1].learning_rate == doctest::Approx(5e-3));
  CHECK(r.epochs[2].learning_rate == doctest::Approx(5e-4));
  CHECK(r.epochs[3].learning_rate == doctest::Approx(5e-5));
}

TEST_CASE("resume after interruption reproduces an uninterrupted run") {
  const auto cfg = small_train(4);
  auto straight_dir = fresh_dir("straight");
  Rng r1 = derive_rng(5, 1);
  Model straight(small_config(), Vocabulary::build(d0_corpus()), r1);
  RunOptions o1;
  o1.out_dir = straight_dir;
  auto full = train(straight, d0_corpus(), d0_corpus(), cfg, o1);

  auto dir = fresh_dir("interrupted");
  Rng r2 = derive_rng(5, 1);
  Model interrupted(small_config(), Vocabulary::build(d0_corpus()), r2);
  RunOptions o2;
  o2.out_dir = dir;
  o2.on_epoch = [](const EpochRecord& e) {
    if (e.epoch == 2) throw std::runtime_error("simulated crash");
  };
  CHECK_THROWS(train(interrupted, d0_corpus(), d0_corpus(), cfg, o2));

  Rng r3(999);
  Model resumed(small_config(), Vocabulary::build(d0_corpus()), r3);
  RunOptions o3;
  o3.out_dir = dir;
  o3.resume = true;
  auto rest = train(resumed, d0_corpus(), d0_corpus(), cfg, o3);
  REQUIRE(rest.epochs.size() == full.epochs.size());
  for (std::size_t i = 0; i < full.epochs.size(); ++i) {
    CHECK(rest.epochs[i].eval_loss == full.epochs[i].eval_loss);
    CHECK(rest.epochs[i].train_loss == full.epochs[i].train_loss);
  }
  for (const auto* p : straight.params().all()) CHECK(resumed.params().at(p->name).value == p->value);

  // Only the selected epochs keep their checkpoints.
  std::size_t kept = 0;
  for (const auto& e : full.epochs) {
    if (!e.checkpoint.empty()) {
      ++kept;
      CHECK(fs::exists(e.checkpoint));
    }
  }
  CHECK(kept >= 1);
  CHECK(kept <= 2);
  CHECK(fs::exists(straight_dir / "last.ckpt"));
  CHECK(fs::exists(straight_dir / "record.json"));
  std::ifstream metrics(straight_dir / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) ++lines;
  CHECK(lines == 4);
}

TEST_CASE("resume without a checkpoint is an error") {
  Rng rng(1);
  Model model(small_config(), Vocabulary::build(d0_corpus()), rng);
  RunOptions o;
  o.out_dir = fresh_dir("nothing");
  o.resume = true;
  CHECK_THROWS_AS(train(model, d0_corpus(), d0_corpus(), small_train(1), o), TrainingError);
}

TEST_CASE("experiment with rechunking and MLMP pretraining") {
  ExperimentInputs in;
  in.corpus = &d0_corpus();
  in.rechunk = true;
  auto t = small_train(1);
  t.pretrain_epochs = 1;
  auto dir = fresh_dir("experiment");
  auto r = run_experiment(in, small_config(), t, dir);
  CHECK(r.epochs.size() == 1);
  CHECK(fs::exists(dir / "pretrain" / "pretrained.ckpt"));
  CHECK(fs::exists(dir / "train" / "record.json"));
  auto ck = load_checkpoint(dir / "pretrain" / "pretrained.ckpt");
  CHECK(ck.model->config().variant == ModelVariant::mlmp_pretrain);

  std::uint64_t seeds[] = {1, 2};
  auto agg = multi_seed(in, small_config(), small_train(1), seeds, fresh_dir("multi"));
  CHECK(agg.runs.size() == 2);
  for (const auto& s : agg.runs) CHECK(s.oracle_m1 >= s.loss_m1);
}
