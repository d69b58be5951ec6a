// medrag: command-line front end for the poisoning simulator.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "medrag/attacks.hpp"
#include "medrag/harness/benchmark.hpp"
#include "medrag/harness/config.hpp"
#include "medrag/harness/experiment.hpp"
#include "medrag/harness/export.hpp"
#include "medrag/harness/grid_io.hpp"
#include "medrag/harness/metrics.hpp"

namespace fs = std::filesystem;
using namespace medrag;
using namespace medrag::harness;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  std::string config;
  std::string out = ".";
  std::size_t threads = 0;
};

ConfigMap load_config(const Globals& g) {
  if (g.config.empty()) return {};
  ConfigMap c = ConfigMap::load(g.config);
  auto known = bench_config_keys();
  const auto& more = attack_config_keys();
  known.insert(more.begin(), more.end());
  c.require_known(known);
  return c;
}

fs::path out_dir(const Globals& g) {
  fs::path d(g.out);
  fs::create_directories(d);
  return d;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

KnowledgeBase load_kb(const Benchmark& b, const std::string& path) {
  return path.empty() ? b.kb : KnowledgeBase::load(path, b.encoders);
}

void apply_eps(KnowledgeBase& kb, const ConfigMap& c) {
  if (c.has("kb.stealth_eps")) kb.set_stealth_eps(c.get("kb.stealth_eps", kDefaultStealthEps));
}

std::string injection_table(const InjectionSummary& s) {
  std::string t = "id\taccepted\tdsem\treason\n";
  for (const auto& o : s.outcomes) {
    t += o.id + '\t' + (o.accepted ? "1" : "0") + '\t' + codec::format_double(o.dsem) + '\t' +
         o.reason + '\n';
  }
  return t;
}

void print_summary(const InjectionSummary& s) {
  std::cout << "benign entries: " << s.benign << "\ninjection attempts: " << s.attempts
            << "\naccepted: " << s.accepted << "\nrejected: " << s.rejected
            << "\nacceptance rate: " << codec::format_fixed(100.0 * s.acceptance_rate(), 2) << "%\n";
}

void write_reports(const fs::path& dir, const std::string& stem,
                   const std::vector<MetricsReport>& reports) {
  const std::string md = emit_report(reports, ReportFormat::markdown);
  write_text(dir / (stem + ".md"), md);
  write_text(dir / (stem + ".csv"), emit_report(reports, ReportFormat::csv));
  std::cout << md;
}

// Attack subcommands work on one benchmark entry.
struct AttackInputs {
  const KBEntry* base = nullptr;
  ReportSubject subject;
  std::string target;
  std::vector<Query> queries;
  std::string flipped;
};

AttackInputs attack_inputs(const Benchmark& b, const std::string& entry_id, const std::string& target) {
  AttackInputs in;
  in.base = entry_id.empty() ? &b.kb.entries().front() : b.kb.find(entry_id);
  if (!in.base) throw PreconditionError("no knowledge-base entry '" + entry_id + "'");
  if (!in.base->report_text || !in.base->image) {
    throw PreconditionError("entry '" + in.base->id + "' lacks a raw report or image");
  }
  const auto sub = parse_subject(*in.base->report_text);
  if (!sub) throw PreconditionError("entry '" + in.base->id + "' names no known finding");
  in.subject = *sub;
  in.target = target.empty() ? (sub->affirmed ? "No" : "Yes") : target;
  if (!b.model.vocab().contains(in.target)) {
    throw PreconditionError("target '" + in.target + "' is not an answer label");
  }
  in.queries = harness::detail::attacker_queries(*b.encoders, sub->finding, in.base->image_emb);
  in.flipped = ta_blackbox(*in.base->report_text).text;
  return in;
}

void write_attack(const fs::path& dir, const std::string& kind, const AttackInputs& in,
                  const AttackResult& r) {
  std::ofstream trace(dir / (kind + "_trace.csv"), std::ios::binary);
  if (!trace) throw FormatError("cannot write trace");
  write_trace_csv(trace, r.trace);

  std::vector<EmbeddingRecord> emb;
  if (!r.text_emb.empty()) emb.push_back({in.base->id + ":text", "injected-text", r.text_emb});
  if (!r.image_emb.empty()) emb.push_back({in.base->id + ":image", "injected-image", r.image_emb});
  save_embeddings((dir / (kind + "_embeddings.tsv")).string(), emb);
  if (r.image) save_grid((dir / (kind + "_image.grid")).string(), *r.image);

  std::ostringstream s;
  s << "attack = " << kind << "\nbase = " << in.base->id << "\ntarget = " << in.target
    << "\nsteps = " << r.steps_taken()
    << "\ninitial_objective = " << codec::format_double(r.initial_objective())
    << "\nfinal_objective = " << codec::format_double(r.final_objective())
    << "\ngrad_norm_at_exit = " << codec::format_double(r.grad_norm_at_exit) << "\n";
  if (r.dsem) {
    s << "dsem = " << codec::format_double(*r.dsem)
      << "\nwithin_stealth = " << (r.within_stealth ? "true" : "false") << "\n";
  }
  s << "stop_reason = " << r.stop_reason << "\n";
  write_text(dir / (kind + "_summary.txt"), s.str());
  std::cout << s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Poisoning simulator for a multimodal medical RAG pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Seed for benchmark synthesis and poisoning")->capture_default_str();
  app.add_option("--config", g.config, "Flat key = value configuration file");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0: all cores)")->capture_default_str();

  std::string bench_dir, kb_path, entry, target_label, snapshot_id, image_path;
  std::string attack = "mixed", intensity = "standard", component = "all", format = "md";
  double rate = 0.15;
  bool grid = false, no_rag = false;
  std::vector<std::string> inputs;

  auto need_bench = [&](CLI::App* sc) {
    sc->add_option("--bench", bench_dir, "Benchmark directory from 'bench gen'")->required();
  };
  auto poison_opts = [&](CLI::App* sc) {
    sc->add_option("--attack", attack, "none, rag_clean, textpo, imapo, mixed, mixed-superpose")
        ->capture_default_str();
    sc->add_option("--rate", rate, "Poison rate in [0,1]")->capture_default_str();
    sc->add_option("--intensity", intensity, "standard or plusplus")->capture_default_str();
    sc->add_option("--target", component, "all, retriever, reranker, generator")->capture_default_str();
  };

  auto* bench = app.add_subcommand("bench", "Synthetic benchmark")->require_subcommand(1);
  auto* bench_gen = bench->add_subcommand("gen", "Generate and train a benchmark into --out");

  auto* kb = app.add_subcommand("kb", "Knowledge-base operations")->require_subcommand(1);
  auto* kb_build = kb->add_subcommand("build", "Write the benchmark's benign knowledge base");
  need_bench(kb_build);
  auto* kb_inject = kb->add_subcommand("inject", "Craft injections and submit them through the gate");
  need_bench(kb_inject);
  kb_inject->add_option("--kb", kb_path, "Knowledge base to poison (default: the benchmark's)");
  poison_opts(kb_inject);
  auto* kb_snap = kb->add_subcommand("snapshot", "Record a snapshot");
  need_bench(kb_snap);
  kb_snap->add_option("--kb", kb_path, "Knowledge-base file")->required();
  auto* kb_roll = kb->add_subcommand("rollback", "Restore a snapshot");
  need_bench(kb_roll);
  kb_roll->add_option("--kb", kb_path, "Knowledge-base file")->required();
  kb_roll->add_option("--snapshot", snapshot_id, "Snapshot id")->required();
  auto* kb_emb = kb->add_subcommand("export-emb", "Export tagged embeddings");
  need_bench(kb_emb);
  kb_emb->add_option("--kb", kb_path, "Knowledge-base file (default: the benchmark's)");

  auto* atk = app.add_subcommand("attack", "Run one optimizer on a knowledge-base entry")
                  ->require_subcommand(1);
  std::vector<CLI::App*> atk_cmds;
  for (const char* name : {"ta", "va", "cmci"}) {
    auto* sc = atk->add_subcommand(name, std::string(name) + " attack");
    need_bench(sc);
    sc->add_option("--entry", entry, "Base entry id (default: the first)");
    sc->add_option("--answer", target_label, "Target answer (default: opposite of the report)");
    if (std::string(name) != "ta") sc->add_option("--image", image_path, "Start image (GRID file)");
    atk_cmds.push_back(sc);
  }

  auto* run = app.add_subcommand("run", "Evaluate a condition, or the standard grid with --grid");
  need_bench(run);
  run->add_option("--kb", kb_path, "Evaluate this knowledge base as is (no further poisoning)");
  run->add_flag("--grid", grid, "Run the no-RAG baseline, clean RAG and the six attack conditions");
  run->add_flag("--no-rag", no_rag, "With --kb: answer without retrieved context");
  poison_opts(run);

  auto* ablate = app.add_subcommand("ablate", "Mixed poisoning aimed at each pipeline stage");
  need_bench(ablate);
  ablate->add_option("--rate", rate, "Poison rate in [0,1]")->capture_default_str();

  auto* report = app.add_subcommand("report", "Merge report CSV files into one table");
  report->add_option("--in", inputs, "Report CSV files")->required();
  report->add_option("--format", format, "md or csv")->check(CLI::IsMember({"md", "csv"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const ConfigMap cfg = load_config(g);
    auto experiment_from = [&]() {
      ExperimentConfig e = experiment_config_from(cfg, g.seed);
      e.threads = g.threads ? g.threads : e.threads;
      if (run->count("--attack") || kb_inject->count("--attack") || !cfg.has("experiment.attack")) {
        e.attack = parse_attack_kind(attack);
      }
      if (run->count("--rate") || kb_inject->count("--rate") || !cfg.has("experiment.rate")) {
        e.poison_rate = rate;
      }
      if (run->count("--intensity") || kb_inject->count("--intensity") ||
          !cfg.has("experiment.intensity")) {
        e.intensity = parse_intensity(intensity);
      }
      if (run->count("--target") || kb_inject->count("--target") || !cfg.has("experiment.target")) {
        e.target = parse_target(component);
      }
      return e;
    };

    if (*bench_gen) {
      const Benchmark b = synth_benchmark(g.seed, bench_config_from(cfg), pipeline_config_from(cfg));
      const fs::path dir = out_dir(g);
      save_benchmark(b, dir);
      const auto rr = b.reranker();
      std::cout << "benchmark written to " << dir.string() << "\nseed: " << b.seed
                << "\ninstances: " << b.instances.size() << "\nknowledge-base entries: " << b.kb.size()
                << "\nclean RAG accuracy: "
                << codec::format_fixed(harness::detail::clean_accuracy(b, rr, true), 2)
                << "%\ndigest: " << b.digest() << "\n";
      return 0;
    }
    if (*report) {
      std::vector<MetricsReport> all;
      for (const auto& path : inputs) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open " + path);
        auto rows = read_report_csv(in, path);
        all.insert(all.end(), rows.begin(), rows.end());
      }
      const std::string text = emit_report(all, format == "md" ? ReportFormat::markdown : ReportFormat::csv);
      if (app.count("--out")) write_text(out_dir(g) / (format == "md" ? "report.md" : "report.csv"), text);
      std::cout << text;
      return 0;
    }

    const Benchmark b = load_benchmark(bench_dir);
    const fs::path dir = out_dir(g);

    if (*kb_build) {
      KnowledgeBase k = b.kb;
      apply_eps(k, cfg);
      k.save((dir / "kb.ragkb").string());
      std::cout << "entries: " << k.size() << "\nstealth eps: " << codec::format_double(k.stealth_eps())
                << "\n";
      return 0;
    }
    if (*kb_inject) {
      KnowledgeBase k = load_kb(b, kb_path);
      apply_eps(k, cfg);
      ExperimentConfig e = experiment_from();
      e.validate();
      const auto rr = b.reranker();
      const PoisonContext ctx{b, rr, e.attacks, e.target, e.threads};
      const auto sum = poison_kb(k, e.poison_rate, e.attack, e.intensity, e.seed, ctx);
      k.save((dir / "kb.ragkb").string());
      write_text(dir / "injections.tsv", injection_table(sum));
      print_summary(sum);
      return 0;
    }
    if (*kb_snap) {
      KnowledgeBase k = KnowledgeBase::load(kb_path, b.encoders);
      const std::string id = k.snapshot();
      k.save((dir / "kb.ragkb").string());
      std::cout << id << "\n";
      return 0;
    }
    if (*kb_roll) {
      KnowledgeBase k = KnowledgeBase::load(kb_path, b.encoders);
      k.rollback(snapshot_id);
      k.save((dir / "kb.ragkb").string());
      std::cout << "restored " << snapshot_id << ": " << k.size() << " entries\n";
      return 0;
    }
    if (*kb_emb) {
      const KnowledgeBase k = load_kb(b, kb_path);
      export_embeddings(k, (dir / "embeddings.tsv").string());
      std::cout << "rows: " << 2 * k.size() << "\n";
      return 0;
    }
    for (auto* sc : atk_cmds) {
      if (!*sc) continue;
      const std::string kind = sc->get_name();
      const AttackSettings s = attack_settings_from(cfg);
      const AttackInputs in = attack_inputs(b, entry, target_label);
      const Encoders& enc = *b.encoders;
      const double eps = cfg.get("kb.stealth_eps", kDefaultStealthEps);
      const StealthBudget budget{in.base->image_emb, in.base->text_emb, eps};
      const StealthBudget* bp = s.respect_gate ? &budget : nullptr;
      AttackResult r;
      if (kind == "ta") {
        TAConfig c = s.ta;
        c.target_answer = in.target;
        r = ta_whitebox(in.queries, in.base->image_emb, enc.text.embed(in.flipped), b.model, c, bp);
      } else if (kind == "va") {
        PixelGrid start;
        if (!image_path.empty()) {
          start = load_grid(image_path);
        } else {
          Rng rng(derive_seed(g.seed, 0x1000));
          start = harness::detail::synthesize_flipped_image(*in.base, in.subject, in.flipped, b.config, s, rng);
        }
        r = va_global(in.queries, start, enc.image, s.va, bp);
      } else {
        CMCIConfig c = s.cmci;
        c.target = in.target;
        const PixelGrid start = image_path.empty() ? *in.base->image : load_grid(image_path);
        r = cmci(start, enc.text.embed(in.flipped), in.queries.front(), b.model, enc.image, c, bp);
      }
      write_attack(dir, kind, in, r);
      return 0;
    }
    if (*run) {
      if (grid) {
        const AttackSettings s = attack_settings_from(cfg);
        std::vector<ExperimentConfig> conds{baseline_condition(g.seed)};
        for (auto& c : attack_grid(g.seed, s)) conds.push_back(c);
        std::vector<MetricsReport> reports;
        std::string gate = "condition\tattempts\taccepted\n";
        for (auto& c : conds) {
          c.threads = g.threads;
          if (cfg.has("kb.stealth_eps")) c.stealth_eps = cfg.get("kb.stealth_eps", kDefaultStealthEps);
          const auto res = run_experiment(b, c);
          reports.push_back(res.report);
          gate += res.report.label + '\t' + std::to_string(res.injections.attempts) + '\t' +
                  std::to_string(res.injections.accepted) + '\n';
        }
        write_text(dir / "gate.tsv", gate);
        write_reports(dir, "report", reports);
        return 0;
      }
      ExperimentResult res;
      if (!kb_path.empty()) {
        const KnowledgeBase k = KnowledgeBase::load(kb_path, b.encoders);
        ExperimentConfig e = experiment_from();
        const std::string label = no_rag ? "LVLM (no RAG)" : "RAG on " + fs::path(kb_path).filename().string();
        res = evaluate(b, k, e.target, !no_rag, label, g.threads);
      } else {
        res = run_experiment(b, experiment_from());
        write_text(dir / "injections.tsv", injection_table(res.injections));
      }
      std::string pred = "id\tgold\tprediction\n";
      const auto test = b.split(false);
      for (std::size_t i = 0; i < test.size(); ++i) {
        pred += test[i]->id + '\t' + test[i]->gold + '\t' + res.predictions[i] + '\n';
      }
      write_text(dir / "predictions.tsv", pred);
      write_reports(dir, "report", {res.report});
      return 0;
    }
    if (*ablate) {
      const AttackSettings s = attack_settings_from(cfg);
      std::vector<MetricsReport> reports;
      std::string stages = "target,queries,top_m_changed,top_k_changed,answer_changed\n";
      const auto rr = b.reranker();
      for (auto c : ablation_grid(g.seed, s)) {
        if (c.attack == AttackKind::mixed) c.poison_rate = rate;
        c.threads = g.threads;
        c.validate();
        KnowledgeBase k = b.kb;
        if (cfg.has("kb.stealth_eps")) k.set_stealth_eps(cfg.get("kb.stealth_eps", kDefaultStealthEps));
        if (c.injects()) {
          const PoisonContext ctx{b, rr, c.attacks, c.target, c.threads};
          poison_kb(k, c.poison_rate, c.attack, c.intensity, c.seed, ctx);
        }
        reports.push_back(evaluate(b, k, c.target, true, c.label(), c.threads).report);
        if (c.target == TargetComponent::all) continue;
        const auto ch = stage_changes(b, k, c.target);
        stages += std::string(to_string(c.target)) + ',' + std::to_string(ch.queries) + ',' +
                  std::to_string(ch.top_m) + ',' + std::to_string(ch.top_k) + ',' +
                  std::to_string(ch.answer) + '\n';
      }
      write_text(dir / "stages.csv", stages);
      write_reports(dir, "ablation", reports);
      std::cout << "\n" << stages;
      return 0;
    }
  } catch (const PreconditionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
