#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mposm/checkpoint.hpp"
#include "mposm/config.hpp"
#include "mposm/eval.hpp"
#include "mposm/synthdata.hpp"
#include "mposm/training.hpp"

namespace py = pybind11;
using namespace mposm;

namespace {

using PySentence = std::pair<std::vector<std::string>, std::optional<std::vector<std::string>>>;

std::vector<PySentence> to_python(const Corpus& c) {
  std::vector<PySentence> out;
  out.reserve(c.size());
  for (const auto& s : c.sentences()) out.emplace_back(s.words, s.gold_tags);
  return out;
}

Corpus from_python(const std::vector<PySentence>& sentences, const std::string& name) {
  std::vector<Sentence> s;
  s.reserve(sentences.size());
  for (const auto& [w, t] : sentences) s.push_back({w, t});
  return Corpus(name, std::move(s));
}

std::vector<std::vector<int>> predict(const std::filesystem::path& checkpoint,
                                      const std::vector<PySentence>& sentences) {
  auto ck = load_checkpoint(checkpoint);
  py::gil_scoped_release release;
  auto corpus = from_python(sentences, "input");
  return ck.model->predict_tags(ck.model->encode(corpus)).tags;
}

std::string run(const std::string& config_text, const std::vector<std::string>& overrides,
                const std::filesystem::path& out_dir) {
  auto cfg = parse_experiment_config(config_text);
  for (const auto& o : overrides) apply_override(cfg, o);
  if (auto errors = cfg.validate(true); !errors.empty()) throw ConfigError(errors);
  py::gil_scoped_release release;
  auto corpus = load_experiment_corpus(cfg.data);
  std::optional<EmbeddingTable> emb;
  ModelConfig model = cfg.model;
  if (!cfg.data.embeddings.empty()) {
    Rng rng = derive_rng(cfg.seeds.front(), 4);
    emb = load_pretrained_embeddings(cfg.data.embeddings, Vocabulary::build(corpus), rng);
    model = with_pretrained_defaults(model, emb->dimension);
  }
  ExperimentInputs in;
  in.corpus = &corpus;
  in.rechunk = cfg.data.rechunk;
  in.embeddings = emb ? &*emb : nullptr;
  auto report = multi_seed(in, model, cfg.train, cfg.seeds, out_dir);
  return report.to_json().dump();
}

}  // namespace

PYBIND11_MODULE(_mposm, m) {
  m.doc() = "Masked part-of-speech model: synthetic data, evaluation and training";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  m.def(
      "generate_synthetic",
      [](const std::string& variant, int n, int words_per_tag, std::uint64_t seed) {
        return to_python(synth::generate_dataset(
            {synth::parse_variant(variant), static_cast<std::size_t>(n), static_cast<std::size_t>(words_per_tag),
             seed}));
      },
      py::arg("variant"), py::arg("n_sentences"), py::arg("words_per_tag") = 5, py::arg("seed") = 1,
      "List of (words, tags) pairs.");

  m.def(
      "load_corpus",
      [](const std::filesystem::path& path, const std::string& format) {
        return to_python(load_corpus(path, parse_corpus_format(format)));
      },
      py::arg("path"), py::arg("format") = "tsv");

  m.def(
      "many_to_one",
      [](const std::vector<int>& pred, const std::vector<std::string>& gold) {
        return eval::many_to_one(pred, gold).to_json().dump();
      },
      py::arg("pred"), py::arg("gold"));

  m.def(
      "m1_upper_bound",
      [](const std::vector<PySentence>& sentences) { return eval::m1_upper_bound(from_python(sentences, "gold")); },
      py::arg("sentences"));

  m.def(
      "tag_mutual_information",
      [](const std::vector<std::vector<std::string>>& tags, const std::vector<int>& offsets, double log_base) {
        return eval::tag_mutual_information(tags, offsets, log_base).to_json().dump();
      },
      py::arg("tags"), py::arg("offsets"), py::arg("log_base") = 0.0);

  m.def("predict", &predict, py::arg("checkpoint"), py::arg("sentences"),
        "Tag ids for each sentence, from a saved checkpoint.");

  m.def("run", &run, py::arg("config_text"), py::arg("overrides") = std::vector<std::string>{},
        py::arg("out_dir") = std::filesystem::path(),
        "Runs every configured seed; returns the aggregate report as JSON text.");

  m.def(
      "resolve_config",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        auto cfg = parse_experiment_config(text);
        for (const auto& o : overrides) apply_override(cfg, o);
        return cfg.to_text();
      },
      py::arg("config_text"), py::arg("overrides") = std::vector<std::string>{});
}
