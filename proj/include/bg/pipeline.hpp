#pragma once

// Pipeline stages over a run directory. Each stage derives its seed from the
// master seed and the stage name, reads upstream artifacts, writes its own,
// and records the step in manifest.json before anything else runs. A config
// hash in the manifest refuses to mix artifacts across config edits.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bg/branch.hpp"
#include "bg/config.hpp"
#include "bg/dt.hpp"
#include "bg/svg.hpp"

namespace bg::pipe {

using nlohmann::json;

constexpr const char* kVersion = "bg-1.0.0";

struct StageOptions {
  std::string out_dir = "run";
  std::optional<uint64_t> seed_override;
  bool baseline = false;
};

inline std::string artifact_path(const StageOptions& o, const std::string& name) {
  return o.out_dir + "/" + name;
}

inline uint64_t stage_seed(const cfg::RunConfig& c, const StageOptions& o,
                           const std::string& stage) {
  return o.seed_override ? *o.seed_override : derive_seed(c.master_seed, stage);
}

// ============================================================================
// Manifest
// ============================================================================

inline json load_manifest(const cfg::RunConfig& c, const StageOptions& o) {
  const std::string path = artifact_path(o, "manifest.json");
  if (!std::filesystem::exists(path)) {
    return json{{"config_hash", c.hash}, {"version", kVersion},
                {"stages", json::object()}};
  }
  std::ifstream in(path);
  require(in.good(), "manifest: cannot open '" + path + "'");
  json m;
  try {
    in >> m;
  } catch (const std::exception& e) {
    fail("manifest: parse error in '" + path + "': " + e.what());
  }
  const std::string stored = m.at("config_hash").get<std::string>();
  require(stored == c.hash,
          "manifest: config hash mismatch in '" + o.out_dir + "': artifacts were "
          "built with config " + stored + " but the current config hashes to " +
          c.hash + "; use a fresh --out-dir or restore the original config");
  return m;
}

inline void save_manifest(const StageOptions& o, const json& m) {
  std::ofstream out(artifact_path(o, "manifest.json"), std::ios::binary);
  require(out.good(), "manifest: cannot write in '" + o.out_dir + "'");
  out << m.dump(2) << "\n";
}

inline void require_stage(const json& manifest, const std::string& dep,
                          const std::string& stage) {
  if (!manifest.at("stages").contains(dep))
    fail("pipeline: stage '" + stage + "' requires completed stage '" + dep + "'");
}

// ============================================================================
// Artifact helpers
// ============================================================================

inline void write_loss_tsv(const std::string& path,
                           const std::vector<double>& trace) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "pipeline: cannot write '" + path + "'");
  out << "sample\tloss\n";
  for (size_t i = 0; i < trace.size(); ++i) {
    out << i << "\t";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", trace[i]);
    out << buf << "\n";
  }
}

inline json tensor_rows(const nn::Tensor& t) {
  json rows = json::array();
  for (size_t r = 0; r < t.rows(); ++r) {
    json row = json::array();
    for (size_t c = 0; c < t.cols(); ++c) row.push_back(t.at(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nn::Tensor tensor_from_rows(const json& rows, const std::string& where) {
  require(rows.is_array() && !rows.empty() && rows[0].is_array(),
          "pipeline: '" + where + "' must be an array of rows");
  const size_t n = rows.size(), d = rows[0].size();
  nn::Tensor t = nn::Tensor::zeros({n, d});
  for (size_t r = 0; r < n; ++r) {
    require(rows[r].is_array() && rows[r].size() == d,
            "pipeline: ragged rows in '" + where + "'");
    for (size_t c = 0; c < d; ++c) t.at(r, c) = rows[r][c].get<double>();
  }
  return t;
}

inline json candidate_to_json(const branch::BranchCandidate& c) {
  return json{{"src_index", c.src_index},
              {"src_pos", c.src_pos},
              {"t", c.t},
              {"guidance_return", c.guidance_return},
              {"statistic", c.statistic},
              {"accepted", c.accepted},
              {"states", tensor_rows(c.seg.states)},
              {"actions", tensor_rows(c.seg.actions)},
              {"rewards", c.seg.rewards}};
}

inline branch::BranchCandidate candidate_from_json(const json& j) {
  branch::BranchCandidate c;
  c.src_index = j.at("src_index").get<uint32_t>();
  c.src_pos = j.at("src_pos").get<size_t>();
  c.t = j.at("t").get<size_t>();
  c.guidance_return = j.at("guidance_return").get<double>();
  c.statistic = j.at("statistic").get<double>();
  c.accepted = j.at("accepted").get<bool>();
  c.seg.states = tensor_from_rows(j.at("states"), "candidate.states");
  c.seg.actions = tensor_from_rows(j.at("actions"), "candidate.actions");
  c.seg.rewards = j.at("rewards").get<std::vector<double>>();
  require(c.seg.states.rows() == c.seg.actions.rows() &&
              c.seg.states.rows() == c.seg.rewards.size(),
          "pipeline: candidate segment lengths disagree");
  return c;
}

inline std::vector<branch::BranchCandidate> load_candidates(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "pipeline: cannot open '" + path + "'");
  std::vector<branch::BranchCandidate> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(candidate_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      fail("pipeline: bad candidate record at " + path + ":" +
           std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// Largest episode-level return-to-go label (g at step 0 plus the bootstrap
// offset) among trajectories that start inside the evaluation start region;
// sets the evaluation target together with the configured scale. Episode
// level rather than per-step because under dense rewards the per-step
// maximum is the near-zero tail label of whichever trajectory ends closest
// to the goal. Restricted to the start region because episodes that begin
// elsewhere (e.g. scripted arms spawned mid-maze) demonstrate returns that
// are unreachable from the evaluated start, and conditioning on them pushes
// the return-to-go recursion out of label support for every policy.
inline double max_rtg_label(const data::Dataset& dataset,
                            const env::MazeSpec& spec) {
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t pos : dataset.ordered()) {
    const data::Trajectory& traj = dataset.trajectories[pos];
    if (traj.length() == 0) continue;
    const double x = traj.states.at(0, 0), y = traj.states.at(0, 1);
    if (x < spec.start_region.lo.x || x > spec.start_region.hi.x ||
        y < spec.start_region.lo.y || y > spec.start_region.hi.y)
      continue;
    mx = std::max(mx, data::rtg(traj)[0] + traj.rtg_bootstrap);
  }
  require(std::isfinite(mx),
          "max_rtg_label: no trajectory starts inside the evaluation start region");
  return mx;
}

// ============================================================================
// Stages
// ============================================================================

namespace detail {

struct StageTimer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                     start)
        .count();
  }
};

inline void record_stage(json& manifest, const StageOptions& o,
                         const std::string& stage, uint64_t seed,
                         std::vector<std::string> artifacts, double wall_ms,
                         json extra) {
  manifest["stages"][stage] = json{{"seed", seed},
                                   {"artifacts", std::move(artifacts)},
                                   {"wall_ms", wall_ms},
                                   {"extra", std::move(extra)}};
  save_manifest(o, manifest);
}

}  // namespace detail

inline void stage_collect(const cfg::RunConfig& c, const StageOptions& o,
                          json& manifest) {
  detail::StageTimer timer;
  const uint64_t seed = stage_seed(c, o, "collect");
  const env::MazeSpec spec = cfg::maze_spec(c);
  const data::Dataset dataset = env::collect_dataset(spec, c.routes, seed, c.gamma);
  data::save_dataset(artifact_path(o, "dataset.bin"), dataset);
  detail::record_stage(manifest, o, "collect", seed, {"dataset.bin"}, timer.ms(),
                       json{{"trajectories", dataset.trajectories.size()},
                            {"steps", dataset.total_steps()}});
}

inline void stage_train_tvf(const cfg::RunConfig& c, const StageOptions& o,
                            json& manifest) {
  require_stage(manifest, "collect", "train-tvf");
  detail::StageTimer timer;
  const uint64_t seed = stage_seed(c, o, "train-tvf");
  const data::Dataset dataset = data::load_dataset(artifact_path(o, "dataset.bin"));
  tvf::TvfConfig tc = c.tvf;
  tc.seed = seed;
  auto result = tvf::train_tvf(dataset, tc);
  tvf::save_tvf(artifact_path(o, "tvf.ckpt"), result.heads);
  std::vector<double> v_trace, q_trace;
  for (const auto& [lv, lq] : result.loss_trace) {
    v_trace.push_back(lv);
    q_trace.push_back(lq);
  }
  write_loss_tsv(artifact_path(o, "tvf_loss_v.tsv"), v_trace);
  write_loss_tsv(artifact_path(o, "tvf_loss_q.tsv"), q_trace);
  detail::record_stage(
      manifest, o, "train-tvf", seed,
      {"tvf.ckpt", "tvf_loss_v.tsv", "tvf_loss_q.tsv"}, timer.ms(),
      json{{"final_loss_v", v_trace.empty() ? 0.0 : v_trace.back()},
           {"final_loss_q", q_trace.empty() ? 0.0 : q_trace.back()}});
}

inline void stage_train_diffusion(const cfg::RunConfig& c, const StageOptions& o,
                                  json& manifest) {
  require_stage(manifest, "collect", "train-diffusion");
  detail::StageTimer timer;
  const uint64_t seed = stage_seed(c, o, "train-diffusion");
  const data::Dataset dataset = data::load_dataset(artifact_path(o, "dataset.bin"));
  diff::DiffusionConfig dc = c.diffusion;
  dc.seed = seed;
  auto result = diff::train_diffusion(dataset, dc);
  diff::save_diffusion(artifact_path(o, "diffusion.ckpt"), result.model);
  write_loss_tsv(artifact_path(o, "diffusion_loss.tsv"), result.loss_trace);
  detail::record_stage(
      manifest, o, "train-diffusion", seed, {"diffusion.ckpt", "diffusion_loss.tsv"},
      timer.ms(),
      json{{"final_loss", result.loss_trace.empty() ? 0.0 : result.loss_trace.back()}});
}

inline void stage_gen_branches(const cfg::RunConfig& c, const StageOptions& o,
                               json& manifest) {
  require_stage(manifest, "collect", "gen-branches");
  require_stage(manifest, "train-tvf", "gen-branches");
  require_stage(manifest, "train-diffusion", "gen-branches");
  detail::StageTimer timer;
  const uint64_t seed = stage_seed(c, o, "gen-branches");
  const data::Dataset dataset = data::load_dataset(artifact_path(o, "dataset.bin"));
  tvf::ValueHeads heads = tvf::load_tvf(artifact_path(o, "tvf.ckpt"));
  diff::DiffusionModel model = diff::load_diffusion(artifact_path(o, "diffusion.ckpt"));
  branch::BranchConfig bc = c.branch;
  bc.seed = seed;
  const branch::BranchResult result =
      branch::generate_branches(model, heads, dataset, bc);

  const std::string log_path = artifact_path(o, "candidates.jsonl");
  std::ofstream log(log_path, std::ios::binary);
  require(log.good(), "pipeline: cannot write '" + log_path + "'");
  for (const auto& cand : result.candidates) log << candidate_to_json(cand) << "\n";
  log.close();

  detail::record_stage(manifest, o, "gen-branches", seed, {"candidates.jsonl"},
                       timer.ms(),
                       json{{"delta", result.delta},
                            {"attempted", result.candidates.size()},
                            {"accepted", result.accepted_count}});
}

inline void stage_expand(const cfg::RunConfig& c, const StageOptions& o,
                         json& manifest) {
  require_stage(manifest, "collect", "expand");
  require_stage(manifest, "train-tvf", "expand");
  require_stage(manifest, "gen-branches", "expand");
  detail::StageTimer timer;
  const uint64_t seed = stage_seed(c, o, "expand");
  const data::Dataset dataset = data::load_dataset(artifact_path(o, "dataset.bin"));
  tvf::ValueHeads heads = tvf::load_tvf(artifact_path(o, "tvf.ckpt"));
  const auto candidates = load_candidates(artifact_path(o, "candidates.jsonl"));
  const data::Dataset expanded = branch::expand_dataset(dataset, candidates, heads);
  data::save_dataset(artifact_path(o, "expanded.bin"), expanded);
  detail::record_stage(manifest, o, "expand", seed, {"expanded.bin"}, timer.ms(),
                       json{{"added", expanded.trajectories.size() -
                                          dataset.trajectories.size()},
                            {"trajectories", expanded.trajectories.size()},
                            {"steps", expanded.total_steps()}});
}

inline void stage_train_dt(const cfg::RunConfig& c, const StageOptions& o,
                           json& manifest) {
  require_stage(manifest, "expand", "train-dt");
  detail::StageTimer timer;
  const uint64_t seed = stage_seed(c, o, "train-dt");
  dt::DtConfig dc = c.dt;
  dc.seed = seed;

  const data::Dataset expanded = data::load_dataset(artifact_path(o, "expanded.bin"));
  auto result = dt::train_dt(expanded, dc);
  dt::save_dt(artifact_path(o, "dt.ckpt"), result.policy);
  write_loss_tsv(artifact_path(o, "dt_loss.tsv"), result.loss_trace);
  json extra{{"final_loss",
              result.loss_trace.empty() ? 0.0 : result.loss_trace.back()}};
  std::vector<std::string> artifacts{"dt.ckpt", "dt_loss.tsv"};

  if (o.baseline) {
    // paired control: same config and seed, unexpanded dataset
    const data::Dataset base = data::load_dataset(artifact_path(o, "dataset.bin"));
    auto base_result = dt::train_dt(base, dc);
    dt::save_dt(artifact_path(o, "dt_baseline.ckpt"), base_result.policy);
    write_loss_tsv(artifact_path(o, "dt_baseline_loss.tsv"), base_result.loss_trace);
    extra["baseline_final_loss"] =
        base_result.loss_trace.empty() ? 0.0 : base_result.loss_trace.back();
    artifacts.push_back("dt_baseline.ckpt");
    artifacts.push_back("dt_baseline_loss.tsv");
  }
  detail::record_stage(manifest, o, "train-dt", seed, std::move(artifacts),
                       timer.ms(), std::move(extra));
}

namespace detail {

inline json eval_one(const cfg::RunConfig& c, const env::MazeSpec& spec,
                     const std::string& ckpt, double target_rtg, double random_ref,
                     double expert_ref, uint64_t seed, const std::string& out_path) {
  dt::DtPolicy policy = dt::load_dt(ckpt);
  dt::EvalConfig ec;
  ec.target_rtg = target_rtg;
  ec.episodes = c.eval_episodes;
  ec.random_ref = random_ref;
  ec.expert_ref = expert_ref;
  ec.seed = seed;
  const dt::EvalReport report = dt::evaluate(policy, spec, ec);

  std::ofstream out(out_path, std::ios::binary);
  require(out.good(), "pipeline: cannot write '" + out_path + "'");
  for (size_t e = 0; e < report.traces.size(); ++e) {
    const auto& tr = report.traces[e];
    out << json{{"episode", e},
                {"return", tr.ret},
                {"success", tr.success},
                {"steps", tr.rewards.size()},
                {"target_rtg", target_rtg}}
        << "\n";
  }
  json summary{{"summary", true},
               {"episodes", report.episodes},
               {"mean_return", report.mean_return},
               {"success_rate", report.success_rate},
               {"normalized_score", report.normalized_score},
               {"target_rtg", target_rtg},
               {"random_ref", random_ref},
               {"expert_ref", expert_ref}};
  out << summary << "\n";
  summary.erase("summary");
  return summary;
}

}  // namespace detail

inline void stage_eval(const cfg::RunConfig& c, const StageOptions& o,
                       json& manifest) {
  require_stage(manifest, "train-dt", "eval");
  detail::StageTimer timer;
  const uint64_t seed = stage_seed(c, o, "eval");
  const env::MazeSpec spec = cfg::maze_spec(c);

  // score references depend only on the maze, not on the stage seed, so
  // overriding the eval seed reuses the same anchors
  const uint64_t ref_seed = derive_seed(c.master_seed, "eval/references");
  const double random_ref =
      dt::random_policy_return(spec, c.reference_episodes, ref_seed);
  const double expert_ref = dt::expert_policy_return(spec, c.expert_waypoints,
                                                     c.reference_episodes, ref_seed);

  const data::Dataset expanded = data::load_dataset(artifact_path(o, "expanded.bin"));
  const double target = c.target_rtg_scale * max_rtg_label(expanded, spec);
  json extra{{"random_ref", random_ref}, {"expert_ref", expert_ref}};
  extra["bg"] = detail::eval_one(c, spec, artifact_path(o, "dt.ckpt"), target,
                                 random_ref, expert_ref, seed,
                                 artifact_path(o, "eval.jsonl"));
  std::vector<std::string> artifacts{"eval.jsonl"};

  if (o.baseline) {
    const std::string base_ckpt = artifact_path(o, "dt_baseline.ckpt");
    if (!std::filesystem::exists(base_ckpt))
      fail("pipeline: eval --baseline requires stage 'train-dt' run with --baseline");
    const data::Dataset base = data::load_dataset(artifact_path(o, "dataset.bin"));
    const double base_target = c.target_rtg_scale * max_rtg_label(base, spec);
    extra["baseline"] =
        detail::eval_one(c, spec, base_ckpt, base_target, random_ref, expert_ref,
                         seed, artifact_path(o, "eval_baseline.jsonl"));
    artifacts.push_back("eval_baseline.jsonl");
  }
  detail::record_stage(manifest, o, "eval", seed, std::move(artifacts), timer.ms(),
                       std::move(extra));
}

// ============================================================================
// Dispatch
// ============================================================================

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{
      "collect",      "train-tvf", "train-diffusion", "gen-branches",
      "expand",       "train-dt",  "eval"};
  return names;
}

inline void run_stage(const cfg::RunConfig& c, const StageOptions& o,
                      const std::string& stage) {
  std::filesystem::create_directories(o.out_dir);
  json manifest = load_manifest(c, o);
  if (stage == "collect") {
    stage_collect(c, o, manifest);
  } else if (stage == "train-tvf") {
    stage_train_tvf(c, o, manifest);
  } else if (stage == "train-diffusion") {
    stage_train_diffusion(c, o, manifest);
  } else if (stage == "gen-branches") {
    stage_gen_branches(c, o, manifest);
  } else if (stage == "expand") {
    stage_expand(c, o, manifest);
  } else if (stage == "train-dt") {
    stage_train_dt(c, o, manifest);
  } else if (stage == "eval") {
    stage_eval(c, o, manifest);
  } else {
    fail("pipeline: unknown stage '" + stage + "'");
  }
}

inline void run_all(const cfg::RunConfig& c, const StageOptions& o) {
  for (const std::string& stage : stage_names()) run_stage(c, o, stage);
}

// ============================================================================
// Plot and report
// ============================================================================

inline void plot_branches(const cfg::RunConfig& c, const std::string& dataset_path,
                          const std::string& log_path, const std::string& svg_path) {
  const env::MazeSpec spec = cfg::maze_spec(c);
  const data::Dataset dataset = data::load_dataset(dataset_path);
  const auto candidates = load_candidates(log_path);

  std::vector<svg::BranchOverlay> overlays;
  for (const auto& cand : candidates) {
    if (!cand.accepted) continue;
    require(cand.src_pos < dataset.trajectories.size() &&
                dataset.trajectories[cand.src_pos].index == cand.src_index,
            "plot: candidate source does not match the dataset");
    const data::Trajectory& src = dataset.trajectories[cand.src_pos];
    svg::BranchOverlay ov;
    const size_t K = std::min<size_t>(c.diffusion.K, cand.t + 1);
    for (size_t u = cand.t + 1 - K; u <= cand.t; ++u)
      ov.condition.push_back(env::Vec2{src.states.at(u, 0), src.states.at(u, 1)});
    for (size_t r = 0; r < cand.seg.states.rows(); ++r)
      ov.branch.push_back(
          env::Vec2{cand.seg.states.at(r, 0), cand.seg.states.at(r, 1)});
    overlays.push_back(std::move(ov));
  }
  svg::write_file(svg_path, svg::render_svg(spec, dataset, overlays));
}

inline std::string format_report(const cfg::RunConfig& c, const StageOptions& o) {
  const json manifest = load_manifest(c, o);
  if (!manifest.at("stages").contains("eval"))
    fail("report: stage 'eval' has not run in '" + o.out_dir + "'");
  const json& stages = manifest.at("stages");
  const json& ev = stages.at("eval");
  if (!ev.at("extra").contains("baseline"))
    fail("report: eval stage has no baseline record; run eval with --baseline for a "
         "paired comparison");

  std::ostringstream out;
  out << "run " << o.out_dir << "  config " << c.hash << "  " << kVersion << "\n";
  out << "stage seeds:";
  for (const std::string& name : stage_names())
    if (stages.contains(name))
      out << " " << name << "="
          << hex64(stages.at(name).at("seed").get<uint64_t>());
  out << "\n";

  if (stages.contains("gen-branches")) {
    const json& gb = stages.at("gen-branches").at("extra");
    const double attempted = gb.at("attempted").get<double>();
    const double accepted = gb.at("accepted").get<double>();
    char rate[32];
    std::snprintf(rate, sizeof(rate), "%.2f",
                  attempted > 0 ? 100.0 * accepted / attempted : 0.0);
    out << "branches: attempted " << gb.at("attempted").get<uint64_t>()
        << "  accepted " << gb.at("accepted").get<uint64_t>() << "  rate " << rate
        << "%  delta " << gb.at("delta").get<double>() << "\n";
  }

  const uint64_t eval_seed = ev.at("seed").get<uint64_t>();
  auto line = [&](const char* label, const json& s) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%-12s normalized score %8.2f  success rate %.3f  mean return "
                  "%.4f  (target rtg %.4f, episodes %zu, eval seed %s)",
                  label, s.at("normalized_score").get<double>(),
                  s.at("success_rate").get<double>(),
                  s.at("mean_return").get<double>(), s.at("target_rtg").get<double>(),
                  size_t(s.at("episodes").get<uint64_t>()), hex64(eval_seed).c_str());
    out << buf << "\n";
  };
  line("BG+DT:", ev.at("extra").at("bg"));
  line("DT-baseline:", ev.at("extra").at("baseline"));
  out << "references: random " << ev.at("extra").at("random_ref").get<double>()
      << "  expert " << ev.at("extra").at("expert_ref").get<double>() << "\n";
  return out.str();
}

}  // namespace bg::pipe
