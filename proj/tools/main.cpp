// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// lwr: list-wise local-descriptor re-ranking pipelines.
//   gen-data  synthesize a descriptor world (bank + manifests)
//   train     train a re-ranker on a bank + train manifest
//   rerank    re-rank manifest shortlists with a checkpoint
//   eval      score result files against a manifest
//   bench     FLOP/latency table for the sparse attention layer
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lwr/infer.hpp"
#include "lwr/manifest.hpp"
#include "lwr/metrics.hpp"
#include "lwr/model.hpp"
#include "lwr/synth.hpp"
#include "lwr/trainer.hpp"

namespace {

constexpr const char* kArtifactVersion = "1.0.0";

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw lwr::ParseError("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw lwr::ParseError("cannot open " + tmp + " for writing");
    os << content;
  }
  std::filesystem::rename(tmp, path);
}

struct RunClock {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  long long ms() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - start)
        .count();
  }
};

// Reproducibility record written atomically next to the primary output.
void write_run_manifest(const std::string& manifest_path, const std::string& subcommand,
                        const nlohmann::json& config, std::uint64_t seed,
                        const nlohmann::json& inputs, const nlohmann::json& outputs,
                        long long wall_ms) {
  nlohmann::json j;
  j["subcommand"] = subcommand;
  j["config"] = config;
  j["seed"] = seed;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["artifact_version"] = kArtifactVersion;
  j["timings"] = {{"wall_ms", wall_ms}};
  write_file_atomic(manifest_path, j.dump(2) + "\n");
}

int default_threads() {
  if (const char* env = std::getenv("LOCORE_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                 std::int64_t seed_override, double train_fraction) {
  RunClock clock;
  lwr::WorldConfig cfg = lwr::world_config_from_json(read_file(config_path));
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  std::filesystem::create_directories(out_dir);

  const lwr::World world = lwr::generate_world(cfg);
  const lwr::WorldSplit split = lwr::split_world(world.truth, train_fraction, cfg.seed);

  // Eval queries are the instance images of the eval split; distractor
  // queries have no relevant items and would only be skipped downstream.
  std::vector<std::string> eval_queries;
  for (const std::string& id : split.eval_ids) {
    if (!world.truth.is_distractor(id)) eval_queries.push_back(id);
  }

  const std::string bank_path = out_dir + "/bank.lcrb";
  const std::string train_path = out_dir + "/train_manifest.json";
  const std::string eval_path = out_dir + "/eval_manifest.json";
  lwr::write_bank(world.bank, bank_path);
  lwr::write_manifest(
      lwr::build_manifest(world.bank, world.truth, split.train_ids, split.train_ids), train_path);
  lwr::write_manifest(lwr::build_manifest(world.bank, world.truth, eval_queries, split.eval_ids),
                      eval_path);
  write_file_atomic(out_dir + "/world_config.json", lwr::world_config_to_json(cfg));

  nlohmann::json outputs = {
      {"bank", bank_path}, {"train_manifest", train_path}, {"eval_manifest", eval_path}};
  write_run_manifest(out_dir + "/run_manifest.json", "gen-data",
                     nlohmann::json::parse(lwr::world_config_to_json(cfg)), cfg.seed,
                     {{"config", config_path}}, outputs, clock.ms());
  std::cout << "world: " << world.bank.image_count() << " images, train "
            << split.train_ids.size() << " / eval " << split.eval_ids.size() << "\n";
  return 0;
}

lwr::ModelConfig resolve_model_config(const std::string& model_config_path,
                                      const std::string& variant, const lwr::DescriptorBank& bank,
                                      int K, std::uint64_t seed) {
  lwr::ModelConfig cfg;
  if (!model_config_path.empty()) {
    cfg = lwr::model_config_from_json(read_file(model_config_path));
  } else {
    cfg = lwr::make_config(lwr::variant_from_name(variant), bank.L, K > 0 ? K : 100);
  }
  if (cfg.L != bank.L) {
    throw lwr::ConfigError("model L = " + std::to_string(cfg.L) + " but bank L = " +
                           std::to_string(bank.L));
  }
  cfg.descriptor_dim = bank.d;
  if (cfg.descriptor_dim != cfg.hidden) cfg.use_projection = true;
  if (seed > 0) cfg.seed = seed;
  cfg.validate();
  return cfg;
}

int cmd_train(const std::string& bank_path, const std::string& manifest_path,
              const std::string& train_config_path, const std::string& out_path,
              const std::string& model_config_path, const std::string& variant, int K,
              std::int64_t seed, bool no_shuffle, bool no_global_attention,
              const std::string& eval_manifest_path, const std::string& resume_path) {
  RunClock clock;
  const lwr::DescriptorBank bank = lwr::read_bank(bank_path);
  const lwr::Manifest manifest = lwr::read_manifest(manifest_path);
  lwr::TrainConfig tc;
  if (!train_config_path.empty()) tc = lwr::train_config_from_json(read_file(train_config_path));
  if (seed >= 0) tc.seed = static_cast<std::uint64_t>(seed);
  if (no_shuffle) tc.shuffle_enabled = false;

  lwr::RerankerModel<float> model = [&] {
    if (!resume_path.empty()) return lwr::load_checkpoint(resume_path);
    lwr::ModelConfig mc = resolve_model_config(model_config_path, variant, bank, K, tc.seed);
    mc.disable_global_attention = no_global_attention;
    return lwr::init_model<float>(mc);
  }();

  lwr::Trainer trainer(model, tc);
  if (!resume_path.empty()) {
    lwr::CheckpointExtra extra;
    lwr::load_checkpoint(resume_path, &extra);
    if (extra.step > 0) {
      std::size_t idx = 0;
      lwr::OptimizerState<float>& st = trainer.optimizer_state();
      model.for_each_param([&](const std::string& name, lwr::Mat<float>&, lwr::ParamKind) {
        for (auto& [tname, tm] : extra.tensors) {
          if (tname == "opt.m." + name) st.m[idx] = tm;
          if (tname == "opt.v." + name) st.v[idx] = tm;
        }
        ++idx;
      });
      st.step = extra.step;  // the step counter continues across resumes
    }
  }

  std::unique_ptr<lwr::Manifest> eval_manifest;
  if (!eval_manifest_path.empty()) {
    eval_manifest = std::make_unique<lwr::Manifest>(lwr::read_manifest(eval_manifest_path));
  }
  const lwr::TrainRunResult run =
      lwr::train(model, bank, manifest, tc, eval_manifest.get(), out_path, &trainer);

  const std::string metrics_path = out_path + ".metrics.jsonl";
  lwr::write_metrics_log(run.metrics, metrics_path);
  write_run_manifest(out_path + ".run.json", "train",
                     nlohmann::json::parse(lwr::train_config_to_json(tc)), tc.seed,
                     {{"bank", bank_path}, {"manifest", manifest_path}},
                     {{"checkpoint", out_path}, {"metrics", metrics_path}}, clock.ms());
  std::cout << "trained " << run.steps << " optimizer steps; checkpoint at " << out_path << "\n";
  return 0;
}

int cmd_rerank(const std::string& checkpoint_path, const std::string& bank_path,
               const std::string& manifest_path, int N, int K, int S,
               const std::string& aggregator, const std::string& out_path, bool remove_easy,
               int threads) {
  RunClock clock;
  const lwr::AggregatorMode mode = lwr::aggregator_from_name(aggregator);
  const lwr::DescriptorBank bank = lwr::read_bank(bank_path);
  const lwr::Manifest manifest = lwr::read_manifest(manifest_path);
  lwr::RerankerModel<float> model = lwr::load_checkpoint(checkpoint_path);
  if (K <= 0) K = model.config.K;
  if (K != model.config.K) {
    throw lwr::ConfigError("--K " + std::to_string(K) + " does not match the checkpoint's K = " +
                           std::to_string(model.config.K));
  }
  if (N <= 0) N = K;
  if (S <= 0) S = std::max(K / 2, 1);

  std::vector<lwr::RerankResult> results(manifest.queries.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t qi = begin; qi < end; ++qi) {
      const lwr::ManifestQuery& q = manifest.queries[qi];
      std::vector<std::string> head;
      for (const std::string& id : q.gallery) {
        if (remove_easy) {
          auto it = q.relevance.find(id);
          if (it != q.relevance.end() && it->second == lwr::RelevanceTier::kEasy) continue;
        }
        head.push_back(id);
        if (static_cast<int>(head.size()) == N) break;
      }
      lwr::RerankResult r = lwr::sliding_rerank(model, bank, q.query_id, head, K, S, mode);
      r.easy_removed_from_db = remove_easy;
      results[qi] = std::move(r);
    }
  };
  if (threads <= 1 || manifest.queries.size() < 2) {
    work(0, manifest.queries.size());
  } else {
    // Queries are independent against the immutable model; a fixed partition
    // keeps the output file identical regardless of the thread count.
    std::vector<std::thread> pool;
    const std::size_t n = manifest.queries.size();
    const std::size_t chunk = (n + static_cast<std::size_t>(threads) - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const std::size_t b = std::min(n, static_cast<std::size_t>(t) * chunk);
      const std::size_t e = std::min(n, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  lwr::write_results(results, out_path);
  nlohmann::json cfg = {
      {"N", N}, {"K", K}, {"S", S}, {"aggregator", aggregator}, {"remove_easy", remove_easy}};
  write_run_manifest(out_path + ".run.json", "rerank", cfg, model.config.seed,
                     {{"checkpoint", checkpoint_path},
                      {"bank", bank_path},
                      {"manifest", manifest_path}},
                     {{"results", out_path}}, clock.ms());
  std::cout << "re-ranked " << results.size() << " queries -> " << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& results_path, const std::string& manifest_path,
             const std::string& protocol_str, const std::vector<int>& ks,
             const std::string& out_path, bool csv) {
  RunClock clock;
  const lwr::Protocol protocol = lwr::protocol_from_name(protocol_str);
  const lwr::Manifest manifest = lwr::read_manifest(manifest_path);
  const std::vector<lwr::RerankResult> results = lwr::read_results(results_path);
  const lwr::EvalReport report = lwr::evaluate(results, manifest, protocol, ks);
  const std::string text = csv ? lwr::report_to_csv(report) : lwr::report_to_json(report);
  if (out_path.empty()) {
    std::cout << text << "\n";
  } else {
    write_file_atomic(out_path, text);
    nlohmann::json cfg = {{"protocol", protocol_str}, {"ks", ks}, {"csv", csv}};
    write_run_manifest(out_path + ".run.json", "eval", cfg, 0,
                       {{"results", results_path}, {"manifest", manifest_path}},
                       {{"report", out_path}}, clock.ms());
  }
  std::cout << "mAP(" << lwr::protocol_name(protocol) << ") = " << report.mean_ap << " over "
            << report.per_query_ap.size() << " queries (" << report.skipped_queries
            << " skipped)\n";
  return 0;
}

int cmd_bench(const std::vector<int>& m_list, int radius, const std::vector<int>& globals_list,
              int hidden, int heads, std::uint64_t seed, const std::string& out_path) {
  if (radius < 1) throw lwr::ConfigError("--radius must be >= 1");
  if (m_list.empty()) throw lwr::ConfigError("--M-list must not be empty");
  std::ostringstream csv;
  csv << "M,radius,globals,sparse_flops,dense_flops,latency_ms\n";
  lwr::Rng rng(seed);
  for (std::size_t i = 0; i < m_list.size(); ++i) {
    const int M = m_list[i];
    const int globals = globals_list.empty()
                            ? std::max(1, M / 64)
                            : globals_list[std::min(i, globals_list.size() - 1)];
    lwr::AttentionPattern pattern;
    pattern.M = M;
    pattern.window_radius = radius;
    for (int g = 0; g < globals; ++g) pattern.global_indices.push_back(g * (M / globals));
    pattern.rebuild_lookups();

    lwr::AttentionLayerParams<float> params;
    params.heads = heads;
    auto fill = [&](lwr::Mat<float>& m, int r, int c) {
      m = lwr::Mat<float>(r, c);
      for (float& v : m.data) v = static_cast<float>(0.1 * rng.next_normal());
    };
    fill(params.wq, hidden, hidden);
    fill(params.wk, hidden, hidden);
    fill(params.wv, hidden, hidden);
    fill(params.wqg, hidden, hidden);
    fill(params.wkg, hidden, hidden);
    fill(params.wvg, hidden, hidden);
    fill(params.wo, hidden, hidden);
    fill(params.bq, 1, hidden);
    fill(params.bk, 1, hidden);
    fill(params.bv, 1, hidden);
    fill(params.bqg, 1, hidden);
    fill(params.bkg, 1, hidden);
    fill(params.bvg, 1, hidden);
    fill(params.bo, 1, hidden);
    lwr::Mat<float> x(M, hidden);
    for (float& v : x.data) v = static_cast<float>(0.5 * rng.next_normal());

    const auto t0 = std::chrono::steady_clock::now();
    lwr::sparse_attention_layer(x, params, pattern);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    csv << M << "," << radius << "," << globals << "," << lwr::flop_count(pattern, hidden, heads)
        << "," << lwr::dense_flop_count(M, hidden, heads) << "," << ms << "\n";
  }
  if (out_path.empty()) {
    std::cout << csv.str();
  } else {
    write_file_atomic(out_path, csv.str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"list-wise local-descriptor re-ranking"};
  app.require_subcommand(1);

  int threads = default_threads();
  bool deterministic = false;
  app.add_option("--threads", threads, "worker threads (env LOCORE_THREADS)");
  app.add_flag("--deterministic", deterministic, "force serial, bit-reproducible execution");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic descriptor world");
  std::string gen_config, gen_out;
  std::int64_t gen_seed = -1;
  double train_fraction = 0.5;
  gen->add_option("--config", gen_config, "world config JSON")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "override the config seed");
  gen->add_option("--train-fraction", train_fraction, "stratified split fraction");

  auto* tr = app.add_subcommand("train", "train a re-ranker");
  std::string tr_bank, tr_manifest, tr_config, tr_out, tr_model_config, tr_eval_manifest,
      tr_resume;
  std::string tr_variant = "tiny";
  int tr_K = 0;
  std::int64_t tr_seed = -1;
  bool no_shuffle = false, no_global = false;
  tr->add_option("--bank", tr_bank, "descriptor bank")->required();
  tr->add_option("--manifest", tr_manifest, "train manifest")->required();
  tr->add_option("--train-config", tr_config, "train config JSON");
  tr->add_option("--out", tr_out, "output checkpoint path")->required();
  tr->add_option("--model-config", tr_model_config, "model config JSON");
  tr->add_option("--variant", tr_variant, "tiny|small|base (when no --model-config)");
  tr->add_option("--K", tr_K, "gallery list size (when no --model-config)");
  tr->add_option("--seed", tr_seed, "override the train seed");
  tr->add_flag("--no-shuffle", no_shuffle, "disable gallery shuffled training");
  tr->add_flag("--no-global-attention", no_global, "ablation: band-only attention");
  tr->add_option("--eval-manifest", tr_eval_manifest, "manifest for periodic eval mAP");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");

  auto* rr = app.add_subcommand("rerank", "re-rank manifest shortlists");
  std::string rr_ckpt, rr_bank, rr_manifest, rr_out;
  std::string rr_aggregator = "sep";
  int rr_N = 0, rr_K = 0, rr_S = 0;
  bool rr_remove_easy = false;
  rr->add_option("--checkpoint", rr_ckpt, "model checkpoint")->required();
  rr->add_option("--bank", rr_bank, "descriptor bank")->required();
  rr->add_option("--manifest", rr_manifest, "eval manifest")->required();
  rr->add_option("--N", rr_N, "candidates to re-rank (default K)");
  rr->add_option("--K", rr_K, "window size (default: checkpoint K)");
  rr->add_option("--S", rr_S, "window stride (default K/2)");
  rr->add_option("--aggregator", rr_aggregator, "sep|mean|first (default sep)");
  rr->add_option("--out", rr_out, "output results JSONL")->required();
  rr->add_flag("--remove-easy", rr_remove_easy,
               "drop easy images from the database before ranking (HARD*)");

  auto* ev = app.add_subcommand("eval", "evaluate result files");
  std::string ev_results, ev_manifest, ev_out;
  std::string ev_protocol = "medium";
  std::vector<int> ev_ks = {1, 2, 4};
  bool ev_csv = false;
  ev->add_option("--results", ev_results, "results JSONL")->required();
  ev->add_option("--manifest", ev_manifest, "manifest with relevance")->required();
  ev->add_option("--protocol", ev_protocol, "medium|hard|hard-star");
  ev->add_option("--ks", ev_ks, "recall cutoffs");
  ev->add_option("--out", ev_out, "report path (stdout when omitted)");
  ev->add_flag("--csv", ev_csv, "emit CSV instead of JSON");

  auto* be = app.add_subcommand("bench", "sparse-attention FLOP/latency table");
  std::vector<int> be_m_list = {512, 1024, 2048};
  std::vector<int> be_globals;
  int be_radius = 128, be_hidden = 64, be_heads = 8;
  std::uint64_t be_seed = 1;
  std::string be_out;
  be->add_option("--M-list", be_m_list, "sequence lengths");
  be->add_option("--radius", be_radius, "window radius");
  be->add_option("--globals", be_globals, "global token counts (parallel to --M-list)");
  be->add_option("--hidden", be_hidden, "hidden size");
  be->add_option("--heads", be_heads, "attention heads");
  be->add_option("--seed", be_seed, "input seed");
  be->add_option("--out", be_out, "CSV path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (deterministic) threads = 1;

  try {
    if (gen->parsed()) return cmd_gen_data(gen_config, gen_out, gen_seed, train_fraction);
    if (tr->parsed()) {
      return cmd_train(tr_bank, tr_manifest, tr_config, tr_out, tr_model_config, tr_variant,
                       tr_K, tr_seed, no_shuffle, no_global, tr_eval_manifest, tr_resume);
    }
    if (rr->parsed()) {
      return cmd_rerank(rr_ckpt, rr_bank, rr_manifest, rr_N, rr_K, rr_S, rr_aggregator, rr_out,
                        rr_remove_easy, threads);
    }
    if (ev->parsed()) return cmd_eval(ev_results, ev_manifest, ev_protocol, ev_ks, ev_out, ev_csv);
    if (be->parsed()) {
      return cmd_bench(be_m_list, be_radius, be_globals, be_hidden, be_heads, be_seed, be_out);
    }
  } catch (const lwr::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    const std::string what = e.what();
    // Unknown enum-style flag values are usage errors.
    if (what.find("unknown aggregator") != std::string::npos ||
        what.find("unknown protocol") != std::string::npos ||
        what.find("unknown model variant") != std::string::npos) {
      return 2;
    }
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
