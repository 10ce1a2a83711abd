#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "logismos/logismos.hpp"
#include "logismos/service.hpp"

namespace fs = std::filesystem;
using namespace logismos;

namespace {

struct Globals {
  std::uint64_t seed = 7;
  std::string config;
  std::string data_root = "data";
};

KeyValueConfig load_config(const Globals& g) {
  return g.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(g.config);
}

std::vector<std::string> split_names(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  for (const auto& r : raw) {
    std::stringstream ss(r);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::vector<Case> load_cases(const Globals& g, const std::vector<std::string>& names) {
  require(!names.empty(), ErrorCode::InvalidArgument, "no volumes given");
  std::vector<Case> out;
  for (const auto& n : names) out.push_back(load_case(fs::path(g.data_root) / "phantoms" / n));
  return out;
}

std::vector<const Case*> pointers(const std::vector<Case>& cs) {
  std::vector<const Case*> p;
  for (const auto& c : cs) p.push_back(&c);
  return p;
}

void print_rows(const std::vector<ErrorRow>& rows, const std::string& mode) {
  ErrorReport r{mode, rows};
  std::cout << format_csv({r});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-object multi-surface graph-search segmentation with learned costs and just-enough interaction"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Master seed")->capture_default_str();
  app.add_option("--config", g.config, "Flat key = value config file");
  app.add_option("--data-root", g.data_root, "Directory holding phantoms/, prior/, models/ and sessions/")
      ->capture_default_str();

  // phantom gen
  auto* phantom = app.add_subcommand("phantom", "Synthetic phantoms");
  phantom->require_subcommand(1);
  auto* gen = phantom->add_subcommand("gen", "Generate phantom volumes with truth surfaces");
  int gen_count = 1;
  std::string gen_prefix = "phantom";
  int gen_lesions = -1;
  double gen_noise = -1;
  gen->add_option("--count", gen_count, "Number of phantoms")->capture_default_str();
  gen->add_option("--prefix", gen_prefix, "Name prefix; volumes are <prefix>_<seed>")->capture_default_str();
  gen->add_option("--lesions", gen_lesions, "Lesion count override");
  gen->add_option("--noise", gen_noise, "Noise sigma override");

  // train voi|naf|rf
  auto* train = app.add_subcommand("train", "Train the VOI detector, NAF or clustered RF");
  train->require_subcommand(1);
  std::vector<std::string> train_volumes;
  auto* train_voi_cmd = train->add_subcommand("voi", "AdaBoost VOI detector from truth bone boxes");
  auto* train_naf_cmd = train->add_subcommand("naf", "Shape prior and neighborhood approximation forest");
  auto* train_rf_cmd = train->add_subcommand("rf", "Clustered random forests (with and without the NAF map)");
  for (auto* c : {train_voi_cmd, train_naf_cmd, train_rf_cmd})
    c->add_option("--volumes", train_volumes, "Training volume names (comma separated or repeated)")->required();

  // segment
  auto* segment = app.add_subcommand("segment", "Segment one volume");
  std::string seg_volume, seg_mode = "gradient", seg_out;
  segment->add_option("--volume", seg_volume, "Volume name under <data-root>/phantoms")->required();
  segment->add_option("--mode", seg_mode, "gradient | rf-only | naf+rf")->capture_default_str();
  segment->add_option("--out", seg_out, "Output directory (default <data-root>/segmentations/<volume>)");

  // jei-script
  auto* jei_cmd = app.add_subcommand("jei-script", "Gradient segmentation corrected by truth-derived nudges");
  std::string jei_volume, jei_out;
  jei_cmd->add_option("--volume", jei_volume, "Volume name")->required();
  jei_cmd->add_option("--out", jei_out, "Output directory (default <data-root>/corrected/<volume>)");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Segment volumes and report errors against their truth");
  std::vector<std::string> eval_volumes;
  std::string eval_mode = "gradient";
  evaluate->add_option("--volumes", eval_volumes, "Volume names")->required();
  evaluate->add_option("--mode", eval_mode, "gradient | rf-only | naf+rf")->capture_default_str();

  // experiment run
  auto* experiment = app.add_subcommand("experiment", "Full train/test comparison on a phantom corpus");
  experiment->require_subcommand(1);
  auto* run = experiment->add_subcommand("run", "Run the three-mode comparison");
  std::string exp_out;
  run->add_option("--out", exp_out, "Output directory (default <data-root>/experiment)");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP session server for interactive editing");
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const KeyValueConfig kv = load_config(g);
    const PipelineConfig cfg = PipelineConfig::from_config(kv);
    const fs::path root = g.data_root;

    if (gen->parsed()) {
      PhantomSpec spec = PhantomSpec::from_config(kv);
      if (gen_lesions >= 0) spec.lesion_count = gen_lesions;
      if (gen_noise >= 0) spec.noise_sigma = gen_noise;
      for (int k = 0; k < gen_count; ++k) {
        const std::uint64_t seed = mix_seed(g.seed, k) % 1000000;
        spec.seed = seed;
        const std::string name = gen_prefix + "_" + std::to_string(seed);
        Case c = case_from_phantom(name, make_phantom(spec));
        save_case(c, root / "phantoms" / name);
        spec.to_config().save((root / "phantoms" / name / "spec.txt").string());
        std::cout << name << "\n";
      }
    } else if (train_voi_cmd->parsed()) {
      const auto cases = load_cases(g, split_names(train_volumes));
      std::vector<std::pair<const Volume3*, std::vector<VOIBox>>> ex;
      for (const auto& c : cases) ex.push_back({&c.volume, {case_voi(c, 0, 0.0), case_voi(c, 1, 0.0)}});
      std::vector<AdaBoostReport> reports;
      const auto model = train_voi(ex, cfg.voi, &reports);
      fs::create_directories(root / "models");
      save_model(model, root / "models" / "voi.lgmd");
      for (std::size_t o = 0; o < reports.size(); ++o)
        std::cout << "object " << o << ": training error " << reports[o].training_error.back() << ", bound "
                  << reports[o].loss_bound.back() << "\n";
    } else if (train_naf_cmd->parsed()) {
      const auto cases = load_cases(g, split_names(train_volumes));
      const auto ptrs = pointers(cases);
      const ShapePrior prior = build_prior(ptrs, cfg.clusters, g.seed);
      save_prior(prior, root / "prior");
      const NAFModel naf = train_naf_on(ptrs, cfg, mix_seed(g.seed, 1));
      fs::create_directories(root / "models");
      save_model(naf, root / "models" / "naf.lgmd");
      std::cout << "NAF: " << naf.trees.size() << " trees; prior written to " << (root / "prior").string() << "\n";
    } else if (train_rf_cmd->parsed()) {
      const auto cases = load_cases(g, split_names(train_volumes));
      const ShapePrior prior = load_prior(root / "prior");
      LearnedModels models = load_models(root / "models");
      const auto reports = train_rf_models(pointers(cases), prior, models, cfg, g.seed, &std::cerr);
      save_model(*models.rf_naf, root / "models" / "rf_naf.lgmd");
      save_model(*models.rf_only, root / "models" / "rf_only.lgmd");
      for (std::size_t k = 0; k < reports.size(); ++k)
        std::cout << cases[k].name << ": " << reports[k].rounds << " JEI rounds, "
                  << (reports[k].converged ? "converged" : "not converged") << "\n";
      std::cout << models.rf_naf->forests.size() << " cluster forests per variant\n";
    } else if (segment->parsed() || evaluate->parsed()) {
      const bool eval = evaluate->parsed();
      const CostMode mode = parse_cost_mode(eval ? eval_mode : seg_mode);
      const ShapePrior prior = load_prior(root / "prior");
      const LearnedModels models = load_models(root / "models");
      std::optional<AdaBoostModel> det;
      if (!cfg.bypass_voi) det = load_voi_model(root / "models" / "voi.lgmd");
      const auto names = eval ? split_names(eval_volumes) : std::vector<std::string>{seg_volume};
      std::vector<ErrorRow> rows;
      for (const auto& c : load_cases(g, names)) {
        const auto seg = segment_case(c, prior, mode, models, cfg, det ? &*det : nullptr);
        if (eval) {
          const auto r = evaluate_segmentation(seg, c);
          rows.insert(rows.end(), r.begin(), r.end());
          continue;
        }
        const fs::path out = seg_out.empty() ? root / "segmentations" / c.name : fs::path(seg_out);
        fs::create_directories(out);
        for (int s = 0; s < seg.graph->surface_count(); ++s) {
          const auto& sd = seg.graph->surfaces[s];
          write_obj(surface_mesh(*seg.graph, seg.solution, s), out / truth_file(sd.object, sd.surface));
        }
        save_graph_cache(*seg.graph, seg.costs, out / "graph.lgcg");
        std::cout << c.name << ": objective " << seg.solution.objective << ", " << seg.graph->columns_of_surface(0)
                  << " columns per surface, written to " << out.string() << "\n";
      }
      if (eval) print_rows(rows, to_string(mode));
    } else if (jei_cmd->parsed()) {
      const auto cases = load_cases(g, {jei_volume});
      const Case& c = cases.front();
      const ShapePrior prior = load_prior(root / "prior");
      Segmentation seg = segment_case(c, prior, CostMode::Gradient, {}, cfg);
      EditHistory h;
      const auto rep = scripted_jei(*seg.flow, c, h, cfg, c.volume.geometry());
      const fs::path out = jei_out.empty() ? root / "corrected" / c.name : fs::path(jei_out);
      fs::create_directories(out);
      for (int s = 0; s < seg.graph->surface_count(); ++s) {
        const auto& sd = seg.graph->surfaces[s];
        write_obj(surface_mesh(*seg.graph, seg.flow->solution(), s), out / truth_file(sd.object, sd.surface));
      }
      std::cout << "round,mean_unsigned_mm,max_error_nodes\n";
      for (std::size_t r = 0; r < rep.mean_unsigned_mm.size(); ++r)
        std::cout << r << "," << rep.mean_unsigned_mm[r] << "," << rep.max_error_nodes[r] << "\n";
      if (!rep.converged)
        std::cerr << "warning: scripted JEI did not converge within " << cfg.jei_max_rounds
                  << " rounds; surfaces exported anyway\n";
    } else if (run->parsed()) {
      const ExperimentConfig ec = ExperimentConfig::from_config(kv, g.seed);
      const fs::path out = exp_out.empty() ? root / "experiment" : fs::path(exp_out);
      const auto res = run_experiment(ec, out, &std::cerr);
      std::cout << format_table(res.reports);
      std::cout << "tables and models written to " << out.string() << "\n";
      std::cerr << "audited " << SolutionAudit::checked().load() << " solutions, "
                << SolutionAudit::violations().load() << " constraint violations\n";
    } else if (serve->parsed()) {
      SessionManager mgr(root, kv);
      httplib::Server srv;
      register_routes(srv, mgr);
      std::cout << "listening on http://" << host << ":" << port << std::endl;
      if (!srv.listen(host, port)) fail(ErrorCode::Io, "cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]" << (e.stage().empty() ? "" : " in " + e.stage()) << ": "
              << e.what() << "\n";
    return 2;
  }
  return 0;
}
