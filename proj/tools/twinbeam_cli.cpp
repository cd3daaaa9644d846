// twinbeam: simulate twin-beam camera stacks and run the noise-ratio, EPR,
// confidence and spectral analyses. Stages exchange data through files in
// the output directory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "twinbeam/twinbeam.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace twinbeam;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kSchema = 1;

enum Exit : int {
  kOk = 0,
  kUsage = 1,
  kConfig = 2,
  kIo = 3,
  kSimulate = 10,
  kAnalyzeNr = 11,
  kAnalyzeEpr = 12,
  kConfidence = 13,
  kSpectral = 14,
  kReport = 15,
};

struct Failure : std::runtime_error {
  int code;
  Failure(int c, const std::string& what) : std::runtime_error(what), code(c) {}
};

// ---------------------------------------------------------------------------
// Formatting and files
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// JSON has no inf/nan; those become null.
json jnum(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void write_file(const fs::path& p, const std::string& content) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Failure(kIo, "cannot write " + p.string());
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Failure(kIo, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Run context: config, seed, hash and the metadata every artifact carries
// ---------------------------------------------------------------------------

struct Run {
  json cfg;
  std::uint64_t seed = 1;
  std::string hash;
  fs::path out;

  json meta(const std::string& command) const {
    return {{"schema", kSchema}, {"tool", "twinbeam"}, {"version", kVersion},
            {"config_hash", hash}, {"seed", seed}, {"command", command}};
  }

  std::string csv_header(const std::string& command) const {
    return "# schema=" + std::to_string(kSchema) + " tool=twinbeam version=" + kVersion + " config_hash=" + hash +
           " seed=" + std::to_string(seed) + " command=" + command + "\n";
  }

  const json& block(const char* name) const {
    static const json empty = json::object();
    return cfg.contains(name) ? cfg.at(name) : empty;
  }
};

template <typename T>
T get(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

Run load_run(const std::string& path, std::optional<std::uint64_t> seed_override, const std::string& out) {
  Run r;
  std::ifstream in(path);
  if (!in) throw Failure(kConfig, "config: cannot open " + path);
  try {
    r.cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw Failure(kConfig, std::string("config: ") + e.what());
  }
  if (!r.cfg.is_object()) throw Failure(kConfig, "config: top level must be an object");
  if (seed_override) r.cfg["seed"] = *seed_override;
  r.seed = get<std::uint64_t>(r.cfg, "seed", 1);
  r.cfg["seed"] = r.seed;
  r.hash = hex64(fnv1a64(r.cfg.dump()));
  r.out = out;
  return r;
}

// Runs fn, translating library and config errors into a stage failure.
void stage(int code, const std::string& label, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Failure&) {
    throw;
  } catch (const Error& e) {
    throw Failure(code, label + ": " + e.what());
  } catch (const json::exception& e) {
    throw Failure(kConfig, label + ": config: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Config blocks
// ---------------------------------------------------------------------------

const char* field_name(FieldMode m) { return m == FieldMode::NearField ? "near" : "far"; }

SimParams sim_params(const Run& run, FieldMode mode) {
  const json& s = run.block("sim");
  SimParams p = tuned_preset(mode);
  p.width = get<std::size_t>(s, "width", p.width);
  p.height = get<std::size_t>(s, "height", p.height);
  if (s.contains("beam")) {
    const json& b = s.at("beam");
    const auto kind = get<std::string>(b, "profile", "gaussian");
    if (kind == "flat") {
      p.mean_profile = BeamProfile::flat();
    } else if (kind == "gaussian") {
      p.mean_profile = BeamProfile::gaussian(get<double>(b, "center_x", double(p.width) / 2.0),
                                             get<double>(b, "center_y", double(p.height) / 2.0),
                                             get<double>(b, "sigma", 45.0));
    } else {
      throw Failure(kConfig, "config: sim.beam.profile must be gaussian or flat");
    }
  } else {
    p.mean_profile = BeamProfile::gaussian(double(p.width) / 2.0, double(p.height) / 2.0, 45.0);
  }
  auto apply = [&](const json& j) {
    p.pairs_per_frame = get<double>(j, "pairs_per_frame", p.pairs_per_frame);
    p.eta_p = get<double>(j, "eta_p", p.eta_p);
    p.eta_c = get<double>(j, "eta_c", p.eta_c);
    p.bg_rate = get<double>(j, "bg_rate", p.bg_rate);
    p.jitter_sigma_x = get<double>(j, "jitter_sigma_x", p.jitter_sigma_x);
    p.jitter_sigma_y = get<double>(j, "jitter_sigma_y", p.jitter_sigma_y);
    p.fixed_pair_count = get<bool>(j, "fixed_pair_count", p.fixed_pair_count);
    p.background_frames = get<bool>(j, "background_frames", p.background_frames);
  };
  apply(s);
  if (s.contains(field_name(mode))) apply(s.at(field_name(mode)));
  p.n_acquisitions = get<std::size_t>(s, "n_acquisitions", p.n_acquisitions);
  p.mode = mode;
  p.seed = stream_seed(run.seed, mode == FieldMode::NearField ? 1 : 2);
  return p;
}

OpticsConfig optics(const Run& run, FieldMode mode) {
  const json& o = run.block("optics");
  OpticsConfig c{mode};
  c.pixel_size_s = get<double>(o, "pixel_size", c.pixel_size_s);
  c.magnification_M = get<double>(o, "magnification", c.magnification_M);
  c.wavelength_lambda = get<double>(o, "wavelength", c.wavelength_lambda);
  c.focal_f = get<double>(o, "focal_length", c.focal_f);
  c.validate();
  return c;
}

PipelineConfig pipeline(const Run& run) {
  const json& a = run.block("analysis");
  PipelineConfig c;
  c.crop = get<std::size_t>(a, "crop", c.crop);
  c.select = get<std::size_t>(a, "select", c.select);
  c.max_shift = get<long>(a, "max_shift", c.max_shift);
  c.gain = get<double>(a, "gain", c.gain);
  c.background_correct = get<bool>(a, "background_correct", c.background_correct);
  const auto norm = get<std::string>(a, "normalization", "covariance");
  if (norm == "covariance") {
    c.normalization = Normalization::Covariance;
  } else if (norm == "pearson") {
    c.normalization = Normalization::Pearson;
  } else {
    throw Failure(kConfig, "config: analysis.normalization must be covariance or pearson");
  }
  c.validate();
  return c;
}

EprPipelineConfig epr_config(const Run& run) {
  EprPipelineConfig c;
  c.pipeline = pipeline(run);
  c.near_optics = optics(run, FieldMode::NearField);
  c.far_optics = optics(run, FieldMode::FarField);
  const int level = get<int>(run.block("analysis"), "ci_level", 68);
  if (level != 68 && level != 95) throw Failure(kConfig, "config: analysis.ci_level must be 68 or 95");
  c.level = level == 68 ? CiLevel::P68 : CiLevel::P95;
  c.fit.fit_offset = get<bool>(run.block("analysis"), "fit_offset", false);
  return c;
}

/// "a..b" is the doubling ladder a, 2a, ... up to b; otherwise a list.
std::vector<std::size_t> parse_bins(const json& j) {
  std::vector<std::size_t> out;
  if (j.is_array()) {
    for (const auto& v : j) out.push_back(v.get<std::size_t>());
  } else {
    const auto s = j.get<std::string>();
    const auto dots = s.find("..");
    if (dots != std::string::npos) {
      std::size_t lo = 0, hi = 0;
      try {
        lo = std::stoul(s.substr(0, dots));
        hi = std::stoul(s.substr(dots + 2));
      } catch (const std::exception&) {
        throw Failure(kConfig, "config: bad bins range '" + s + "'");
      }
      if (lo == 0 || hi < lo) throw Failure(kConfig, "config: bad bins range '" + s + "'");
      for (std::size_t k = lo; k <= hi; k *= 2) out.push_back(k);
    } else {
      std::stringstream ss(s);
      std::string tok;
      while (std::getline(ss, tok, ',')) out.push_back(std::stoul(tok));
    }
  }
  if (out.empty()) throw Failure(kConfig, "config: empty bins list");
  return out;
}

std::vector<std::size_t> group_sizes(const Run& run) {
  const json& a = run.block("analysis");
  if (!a.contains("group_sizes")) return {5, 10, 20, 40, 100, 200};
  return a.at("group_sizes").get<std::vector<std::size_t>>();
}

AnalysisRegion region_of(const json& j) {
  return {j.at("x0").get<std::size_t>(), j.at("y0").get<std::size_t>(), j.at("width").get<std::size_t>(),
          j.at("height").get<std::size_t>()};
}

json region_json(const AnalysisRegion& r) {
  return {{"x0", r.x0}, {"y0", r.y0}, {"width", r.width}, {"height", r.height}};
}

// ---------------------------------------------------------------------------
// Stack sets on disk: <dir>/{probe,conj,bg_probe,bg_conj}.tbim
// ---------------------------------------------------------------------------

fs::path input_dir(const Run& run, FieldMode mode) {
  const json& io = run.block("io");
  if (io.contains(field_name(mode))) return fs::path(io.at(field_name(mode)).get<std::string>());
  return run.out / field_name(mode);
}

RawStack read_tbim(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Failure(kIo, "cannot read " + p.string());
  return read_stack_as<float>(in);
}

std::optional<std::vector<AcquisitionSet>> load_field(const Run& run, FieldMode mode) {
  const fs::path dir = input_dir(run, mode);
  if (!fs::exists(dir / "probe.tbim") || !fs::exists(dir / "conj.tbim")) return std::nullopt;
  StackSet s;
  s.probe = read_tbim(dir / "probe.tbim");
  s.conj = read_tbim(dir / "conj.tbim");
  if (fs::exists(dir / "bg_probe.tbim") && fs::exists(dir / "bg_conj.tbim")) {
    s.bg_probe = read_tbim(dir / "bg_probe.tbim");
    s.bg_conj = read_tbim(dir / "bg_conj.tbim");
  }
  return from_stacks(s);
}

std::vector<AcquisitionSet> require_field(const Run& run, FieldMode mode, int code) {
  auto f = load_field(run, mode);
  if (!f) throw Failure(code, std::string(mode == FieldMode::NearField ? "nearfield" : "farfield") + ": input missing");
  return std::move(*f);
}

// ---------------------------------------------------------------------------
// SVG diagnostics
// ---------------------------------------------------------------------------

struct Series {
  std::vector<double> x, y;
  std::string color = "#1f77b4";
  bool markers = true;
  bool line = true;
  std::string label;
};

struct Plot {
  std::string title, xlabel, ylabel;
  std::vector<Series> series;
  std::vector<std::pair<double, std::string>> hlines;  // value, label
  bool log2_x = false;
};

std::string svg(const Plot& p) {
  constexpr double W = 640, H = 420, L = 70, R = 20, T = 40, B = 55;
  auto tx = [&](double x) { return p.log2_x ? std::log2(x) : x; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : p.series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  for (const auto& [v, _] : p.hlines) {
    y0 = std::min(y0, v);
    y1 = std::max(y1, v);
  }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) y1 = y0 + 1.0;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  auto f2 = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };
  auto tick = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.4g", v);
    return std::string(b);
  };

  std::string o = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + f2(W) + "\" height=\"" + f2(H) +
                  "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + f2(W / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + p.title + "</text>\n";
  o += "<rect x=\"" + f2(L) + "\" y=\"" + f2(T) + "\" width=\"" + f2(W - L - R) + "\" height=\"" + f2(H - T - B) +
       "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0;
    o += "<text x=\"" + f2(L - 6) + "\" y=\"" + f2(py(yv) + 4) + "\" text-anchor=\"end\">" + tick(yv) + "</text>\n";
    const double xt = x0 + (x1 - x0) * i / 4.0;
    const double xv = p.log2_x ? std::exp2(xt) : xt;
    o += "<text x=\"" + f2(px(xv)) + "\" y=\"" + f2(H - B + 16) + "\" text-anchor=\"middle\">" + tick(xv) + "</text>\n";
  }
  o += "<text x=\"" + f2((L + W - R) / 2) + "\" y=\"" + f2(H - 12) + "\" text-anchor=\"middle\">" + p.xlabel +
       "</text>\n";
  o += "<text x=\"16\" y=\"" + f2((T + H - B) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       f2((T + H - B) / 2) + ")\">" + p.ylabel + "</text>\n";
  for (const auto& [v, label] : p.hlines) {
    o += "<line x1=\"" + f2(L) + "\" x2=\"" + f2(W - R) + "\" y1=\"" + f2(py(v)) + "\" y2=\"" + f2(py(v)) +
         "\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n";
    o += "<text x=\"" + f2(W - R - 4) + "\" y=\"" + f2(py(v) - 4) + "\" text-anchor=\"end\" fill=\"gray\">" + label +
         "</text>\n";
  }
  double ly = T + 14;
  for (const auto& s : p.series) {
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      pts += f2(px(s.x[i])) + "," + f2(py(s.y[i])) + " ";
    }
    if (s.line) o += "<polyline fill=\"none\" stroke=\"" + s.color + "\" points=\"" + pts + "\"/>\n";
    if (s.markers) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.y[i])) continue;
        o += "<circle cx=\"" + f2(px(s.x[i])) + "\" cy=\"" + f2(py(s.y[i])) + "\" r=\"3\" fill=\"" + s.color + "\"/>\n";
      }
    }
    if (!s.label.empty()) {
      o += "<text x=\"" + f2(L + 10) + "\" y=\"" + f2(ly) + "\" fill=\"" + s.color + "\">" + s.label + "</text>\n";
      ly += 16;
    }
  }
  o += "</svg>\n";
  return o;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

json file_entry(const Run& run, const fs::path& p, const std::string& content) {
  return {{"path", fs::relative(p, run.out).generic_string()}, {"bytes", content.size()},
          {"fnv1a64", hex64(fnv1a64(content))}};
}

std::string stack_bytes(const RawStack& s) {
  std::ostringstream os(std::ios::binary);
  write_stack(s, os);
  return os.str();
}

void cmd_simulate(const Run& run) {
  json manifest = run.meta("simulate");
  json files = json::array();
  json params = json::object();
  stage(kSimulate, "simulate", [&] {
    const json& s = run.block("sim");
    if (s.empty()) throw Failure(kConfig, "config: simulate needs a sim block");
    const auto fields = get<std::vector<std::string>>(s, "fields", {"near", "far"});
    const bool coherent = get<bool>(s, "coherent", false);
    for (const auto& name : fields) {
      if (name != "near" && name != "far") throw Failure(kConfig, "config: sim.fields entries must be near or far");
      const FieldMode mode = name == "near" ? FieldMode::NearField : FieldMode::FarField;
      const SimParams p = sim_params(run, mode);
      try {
        p.validate();
      } catch (const Error& e) {
        throw Failure(kConfig, std::string("config: sim.") + name + ": " + e.what());
      }
      const auto acqs = coherent ? simulate_coherent_pair(p) : simulate_acquisitions(p);
      const auto ps = optics(run, mode).pixel_size_s;
      const auto stacks = to_stacks(acqs, ps);
      const fs::path dir = run.out / name;
      auto emit = [&](const char* file, const RawStack& st) {
        const auto bytes = stack_bytes(st);
        write_file(dir / file, bytes);
        files.push_back(file_entry(run, dir / file, bytes));
      };
      emit("probe.tbim", stacks.probe);
      emit("conj.tbim", stacks.conj);
      if (stacks.bg_probe) {
        emit("bg_probe.tbim", *stacks.bg_probe);
        emit("bg_conj.tbim", *stacks.bg_conj);
      }
      params[name] = {{"width", p.width},
                      {"height", p.height},
                      {"pairs_per_frame", p.pairs_per_frame},
                      {"eta_p", p.eta_p},
                      {"eta_c", p.eta_c},
                      {"bg_rate", p.bg_rate},
                      {"jitter_sigma_x", p.jitter_sigma_x},
                      {"jitter_sigma_y", p.jitter_sigma_y},
                      {"n_acquisitions", p.n_acquisitions},
                      {"coherent", coherent},
                      {"stream_seed", p.seed}};
    }
  });
  manifest["params"] = params;
  manifest["files"] = files;
  write_file(run.out / "simulate_manifest.json", manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// analyze-nr
// ---------------------------------------------------------------------------

void cmd_analyze_nr(const Run& run) {
  json summary = run.meta("analyze-nr");
  stage(kAnalyzeNr, "analyze-nr", [&] {
    const json& a = run.block("analysis");
    const auto bins = parse_bins(a.contains("bins") ? a.at("bins") : json("1..32"));
    const PipelineConfig cfg = pipeline(run);
    bool any = false;
    for (FieldMode mode : {FieldMode::NearField, FieldMode::FarField}) {
      auto acqs = load_field(run, mode);
      if (!acqs) continue;
      any = true;
      const std::string name = field_name(mode);
      NrRegions regions;
      if (a.contains("nr_region")) {
        const auto r = region_of(a.at("nr_region"));
        regions = {r, r, mode == FieldMode::FarField};
      } else {
        regions = NrRegions::from_geometry(plan_geometry(*acqs, mode, cfg));
      }
      const auto raw = nr_curve(*acqs, regions, bins, false, cfg.gain);
      std::vector<NrPoint> corr;
      if (acqs->front().has_background()) corr = nr_curve(*acqs, regions, bins, true, cfg.gain);

      std::string csv = run.csv_header("analyze-nr") + "field,bin_k,background_corrected,nr,sem,nr_db\n";
      json rows = json::array();
      for (const std::vector<NrPoint>* curve : {&raw, &static_cast<const std::vector<NrPoint>&>(corr)}) {
        for (const auto& pt : *curve) {
          const double db = pt.nr > 0.0 ? nr_to_db(pt.nr) : std::numeric_limits<double>::infinity();
          csv += name + "," + std::to_string(pt.bin_k) + "," + (pt.background_corrected ? "1" : "0") + "," +
                 num(pt.nr) + "," + num(pt.sem) + "," + num(db) + "\n";
          rows.push_back(json{{"bin_k", pt.bin_k}, {"background_corrected", pt.background_corrected},
                          {"nr", jnum(pt.nr)}, {"sem", jnum(pt.sem)}, {"nr_db", jnum(db)}});
        }
      }
      write_file(run.out / ("nr_" + name + ".csv"), csv);

      Plot plot{"Noise ratio vs binning (" + name + " field)", "super-pixel size k (px)", "NR", {}, {}, true};
      plot.hlines.push_back({1.0, "shot-noise limit"});
      auto series = [](const std::vector<NrPoint>& c, const char* color, const char* label) {
        Series s;
        for (const auto& pt : c) {
          s.x.push_back(double(pt.bin_k));
          s.y.push_back(pt.nr);
        }
        s.color = color;
        s.label = label;
        return s;
      };
      plot.series.push_back(series(raw, "#1f77b4", "raw"));
      if (!corr.empty()) plot.series.push_back(series(corr, "#d62728", "background corrected"));
      write_file(run.out / ("nr_" + name + ".svg"), svg(plot));

      const auto& best = corr.empty() ? raw : corr;
      summary["fields"][name] = {{"n_acquisitions", acqs->size()},
                                 {"probe_region", region_json(regions.probe)},
                                 {"conj_region", region_json(regions.conj)},
                                 {"rotated", regions.rotated},
                                 {"points", rows},
                                 {"plateau_bin", best.back().bin_k},
                                 {"plateau_nr", jnum(best.back().nr)},
                                 {"plateau_sem", jnum(best.back().sem)},
                                 {"plateau_background_corrected", best.back().background_corrected}};
    }
    if (!any) throw Failure(kAnalyzeNr, "analyze-nr: input missing (no near or far stacks)");
  });
  write_file(run.out / "nr_summary.json", summary.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// analyze-epr
// ---------------------------------------------------------------------------

json fit_json(const GaussFitResult& f, const CrossCorrMap& map) {
  const auto& m = f.model;
  json ci68 = json::array(), ci95 = json::array();
  for (std::size_t i = 0; i < 6; ++i) {
    ci68.push_back(jnum(f.ci68[i]));
    ci95.push_back(jnum(f.ci95[i]));
  }
  return {{"amplitude", m.A},
          {"lag_x0", map.lag_x(m.x0)},
          {"lag_y0", map.lag_y(m.y0)},
          {"sigma_x", m.sigma_x},
          {"sigma_y", m.sigma_y},
          {"offset", m.B},
          {"ci68", ci68},
          {"ci95", ci95},
          {"ci_order", {"amplitude", "x0", "y0", "sigma_x", "sigma_y", "offset"}},
          {"ssr", jnum(f.ssr)},
          {"n_iter", f.n_iter},
          {"converged", f.converged}};
}

json axis_json(const EprAxisResult& r) {
  return {{"axis", to_string(r.axis)},
          {"ci_level", r.level == CiLevel::P68 ? 68 : 95},
          {"sigma_near_px", r.near.sigma},
          {"ci_near_px", r.near.ci},
          {"sigma_far_px", r.far.sigma},
          {"ci_far_px", r.far.ci},
          {"delta_r_m", r.delta_r},
          {"delta_p_over_hbar_per_m", r.delta_p_hbar},
          {"product_hbar2", r.product},
          {"delta", jnum(r.delta)},
          {"confidence", jnum(r.confidence)},
          {"violation", r.violation},
          {"significant", check_significance(r)}};
}

std::string map_csv(const Run& run, const std::string& command, const CrossCorrMap& m) {
  std::string csv = run.csv_header(command) + "lag_x,lag_y,value\n";
  for (std::size_t y = 0; y < m.values.height(); ++y) {
    for (std::size_t x = 0; x < m.values.width(); ++x) {
      csv += std::to_string(long(x) + m.lag_x0) + "," + std::to_string(long(y) + m.lag_y0) + "," +
             num(m.values(x, y)) + "\n";
    }
  }
  return csv;
}

// Cuts through the fitted peak along both axes with the model overlaid.
std::string fit_svg(const std::string& name, const CrossCorrMap& m, const std::optional<GaussFitResult>& fit) {
  std::size_t cx = 0, cy = 0;
  if (fit) {
    cx = std::size_t(std::clamp(std::lround(fit->model.x0), 0L, long(m.values.width()) - 1));
    cy = std::size_t(std::clamp(std::lround(fit->model.y0), 0L, long(m.values.height()) - 1));
  } else {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < m.values.height(); ++y) {
      for (std::size_t x = 0; x < m.values.width(); ++x) {
        if (m.values(x, y) > best) {
          best = m.values(x, y);
          cx = x;
          cy = y;
        }
      }
    }
  }
  Plot plot{"Cross-correlation cuts (" + name + " field)", "lag (px)", "correlation", {}, {}, false};
  Series dx{{}, {}, "#1f77b4", true, false, "x cut"}, dy{{}, {}, "#2ca02c", true, false, "y cut"};
  Series fx{{}, {}, "#1f77b4", false, true, ""}, fy{{}, {}, "#2ca02c", false, true, ""};
  for (std::size_t x = 0; x < m.values.width(); ++x) {
    dx.x.push_back(m.lag_x(double(x)));
    dx.y.push_back(m.values(x, cy));
    if (fit) {
      fx.x.push_back(m.lag_x(double(x)));
      fx.y.push_back(fit->model(double(x), double(cy)));
    }
  }
  for (std::size_t y = 0; y < m.values.height(); ++y) {
    dy.x.push_back(m.lag_y(double(y)));
    dy.y.push_back(m.values(cx, y));
    if (fit) {
      fy.x.push_back(m.lag_y(double(y)));
      fy.y.push_back(fit->model(double(cx), double(y)));
    }
  }
  plot.series = {dx, dy};
  if (fit) {
    fx.label = "fit (x)";
    fy.label = "fit (y)";
    plot.series.push_back(fx);
    plot.series.push_back(fy);
  }
  plot.hlines.push_back({0.0, "0"});
  return svg(plot);
}

FieldMoments field_moments(const Run& run, FieldMode mode, int code, const PipelineConfig& cfg) {
  const auto acqs = require_field(run, mode, code);
  return FieldMoments::build(acqs, mode, cfg);
}

json geometry_json(const PipelineGeometry& g) {
  return {{"probe_region", region_json(g.probe_region)},
          {"conj_region", region_json(g.conj_region)},
          {"shift", {g.shift.dx, g.shift.dy}},
          {"rotated", g.rotated},
          {"select", g.select}};
}

void cmd_analyze_epr(const Run& run) {
  json report = run.meta("analyze-epr");
  stage(kAnalyzeEpr, "analyze-epr", [&] {
    const auto cfg = epr_config(run);
    // Variance moments are kept whatever the fit normalization so the peak
    // check can always form the Pearson map.
    auto with_var = cfg.pipeline;
    with_var.normalization = Normalization::Pearson;
    const auto near = field_moments(run, FieldMode::NearField, kAnalyzeEpr, with_var);
    const auto far = field_moments(run, FieldMode::FarField, kAnalyzeEpr, with_var);
    const std::size_t n = std::min(near.moments.size(), far.moments.size());
    report["n_acquisitions"] = n;
    std::string no_peak;
    report["normalization"] = cfg.pipeline.normalization == Normalization::Covariance ? "covariance" : "pearson";

    for (const auto* fm : {&near, &far}) {
      const std::string name = fm == &near ? "near" : "far";
      const auto map = fm->map(0, n, cfg.pipeline.normalization);
      write_file(run.out / ("xcorr_" + name + ".csv"), map_csv(run, "analyze-epr", map));
      std::optional<GaussFitResult> fit;
      try {
        fit = fit_gaussian2d(map, cfg.fit);
      } catch (const Error&) {
      }
      const auto peak = correlation_peak(fm->map(0, n, Normalization::Pearson), fm->geometry.select * fm->geometry.select);
      report["fields"][name]["peak"] = {
          {"max_abs_pearson", peak.max_abs}, {"threshold", peak.threshold}, {"present", peak.present}};
      if (!peak.present && no_peak.empty()) no_peak = name;
      report["fields"][name]["geometry"] = geometry_json(fm->geometry);
      report["fields"][name]["fit"] = fit ? fit_json(*fit, map) : json(nullptr);
      write_file(run.out / ("xcorr_" + name + ".svg"), fit_svg(name, map, fit));
    }

    const auto g = epr_for_group(near, far, 0, n, cfg);
    report["fit_ok"] = g.ok;
    report["error"] = g.ok ? json(nullptr) : json(g.error);
    report["axes"] = g.ok ? json{axis_json(g.x), axis_json(g.y)} : json::array();
    // A Gaussian fitted to a map without a correlation peak measures noise.
    report["violation"] = g.ok && no_peak.empty() && (check_significance(g.x) || check_significance(g.y));
    if (report["violation"].get<bool>()) {
      report["verdict"] = "EPR violation (product < 1/4 with C > 5)";
    } else if (!no_peak.empty()) {
      report["verdict"] = "no violation: no correlation peak in the " + no_peak + " field";
    } else {
      report["verdict"] = "no violation";
    }
  });
  write_file(run.out / "epr_report.json", report.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// confidence
// ---------------------------------------------------------------------------

void cmd_confidence(const Run& run) {
  json out = run.meta("confidence");
  stage(kConfidence, "confidence", [&] {
    const auto cfg = epr_config(run);
    const auto sizes = group_sizes(run);
    const auto near = field_moments(run, FieldMode::NearField, kConfidence, cfg.pipeline);
    const auto far = field_moments(run, FieldMode::FarField, kConfidence, cfg.pipeline);
    const auto curves = confidence_curve(near, far, sizes, cfg);

    std::string csv = run.csv_header("confidence") + "axis,n_images,n_groups,n_failed,unused,mean_c,sd_c\n";
    Plot plot{"Confidence level vs number of images", "images per group N", "C (standard deviations)", {}, {}, true};
    plot.hlines.push_back({5.0, "C = 5"});
    const char* colors[2] = {"#1f77b4", "#d62728"};
    for (std::size_t a = 0; a < 2; ++a) {
      const auto& c = curves[a];
      json entries = json::array();
      std::optional<std::size_t> first_above;
      Series data{{}, {}, colors[a], true, false, std::string("axis ") + to_string(c.axis)};
      Series model{{}, {}, colors[a], false, true, ""};
      for (const auto& e : c.entries) {
        csv += std::string(to_string(c.axis)) + "," + std::to_string(e.n_images) + "," + std::to_string(e.n_groups) +
               "," + std::to_string(e.n_failed) + "," + std::to_string(e.unused) + "," + num(e.mean_c) + "," +
               num(e.sd_c) + "\n";
        entries.push_back(json{{"n_images", e.n_images}, {"n_groups", e.n_groups}, {"n_failed", e.n_failed},
                           {"unused", e.unused}, {"mean_c", jnum(e.mean_c)}, {"sd_c", jnum(e.sd_c)}});
        if (!first_above && std::isfinite(e.mean_c) && e.mean_c > 5.0) first_above = e.n_images;
        data.x.push_back(double(e.n_images));
        data.y.push_back(e.mean_c);
        model.x.push_back(double(e.n_images));
        model.y.push_back(c.fitted_A0 * std::sqrt(double(e.n_images)));
      }
      plot.series.push_back(data);
      plot.series.push_back(model);
      out["axes"].push_back(json{{"axis", to_string(c.axis)},
                             {"entries", entries},
                             {"fitted_A0", jnum(c.fitted_A0)},
                             {"scaling_exponent", jnum(c.scaling_exponent)},
                             {"smallest_n_above_5", first_above ? json(*first_above) : json(nullptr)}});
    }
    write_file(run.out / "confidence.csv", csv);
    write_file(run.out / "confidence.svg", svg(plot));
  });
  write_file(run.out / "confidence.json", out.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// spectral
// ---------------------------------------------------------------------------

SpectrumModel spectrum_of(const json& j) {
  const auto kind = get<std::string>(j, "kind", "lorentzian");
  if (kind == "flat") return SpectrumModel::flat(j.at("nr").get<double>());
  if (kind == "lorentzian") {
    const double nr0 = get<double>(j, "nr0", 0.3112);
    if (j.contains("gamma") && j.at("gamma").is_string() && j.at("gamma").get<std::string>() == "inf") {
      return SpectrumModel::lorentzian_diff(nr0, std::numeric_limits<double>::infinity());
    }
    // Width given either in rad/s ("gamma") or as a frequency ("gamma_hz").
    const double gamma =
        j.contains("gamma") ? j.at("gamma").get<double>() : 2.0 * std::numbers::pi * get<double>(j, "gamma_hz", 1e6);
    return SpectrumModel::lorentzian_diff(nr0, gamma);
  }
  if (kind == "tabulated") {
    return SpectrumModel::tabulated(j.at("omega").get<std::vector<double>>(), j.at("s_p").get<std::vector<double>>(),
                                    j.at("s_c").get<std::vector<double>>(), j.at("s_pc").get<std::vector<double>>(),
                                    j.at("sn_p").get<double>(), j.at("sn_c").get<double>(),
                                    get<bool>(j, "one_sided", false));
  }
  throw Failure(kConfig, "config: spectral.spectrum.kind must be flat, lorentzian or tabulated");
}

PulseProfile pulse_of(const json& j) {
  const auto kind = get<std::string>(j, "kind", "rect");
  const double t = get<double>(j, "duration", 1e-6);
  if (kind == "rect") return PulseProfile::rect(t);
  if (kind == "gaussian") return PulseProfile::gaussian(t);
  throw Failure(kConfig, "config: spectral.pulse.kind must be rect or gaussian");
}

json prediction_json(const SpectralPrediction& p) {
  return {{"nr", p.nr}, {"nr_db", p.nr > 0.0 ? jnum(nr_to_db(p.nr)) : json(nullptr)}, {"converged", p.converged},
          {"n_points", p.n_points}, {"omega_max", p.omega_max}, {"step", p.step}};
}

void cmd_spectral(const Run& run) {
  json out = run.meta("spectral");
  stage(kSpectral, "spectral", [&] {
    const json& s = run.block("spectral");
    if (s.empty()) throw Failure(kConfig, "config: spectral needs a spectral block");
    const auto model = spectrum_of(s.contains("spectrum") ? s.at("spectrum") : json::object());
    const auto pulse = pulse_of(s.contains("pulse") ? s.at("pulse") : json::object());
    const json& td_cfg = s.contains("time_domain") ? s.at("time_domain") : json::object();
    TemporalSimParams sim;
    sim.dt = get<double>(td_cfg, "dt", sim.dt);
    sim.duration = get<double>(td_cfg, "duration", sim.duration);
    sim.frame_gap = get<double>(td_cfg, "frame_gap", sim.frame_gap);
    sim.n_trials = get<std::size_t>(td_cfg, "n_trials", sim.n_trials);
    sim.seed = run.seed;
    const double threshold = get<double>(s, "agreement_sem", 3.0);

    const auto pred = spectral_nr_predict(model, pulse);
    out["prediction"] = prediction_json(pred);
    if (get<bool>(td_cfg, "enabled", true)) {
      const auto td = time_domain_nr(model, pulse, sim);
      const double z = std::fabs(td.nr - pred.nr) / td.mc_sem;
      out["time_domain"] = {{"nr", td.nr}, {"mc_sem", td.mc_sem}, {"n_trials", td.n_trials}};
      out["deviation_sem"] = jnum(z);
      out["agreement"] = z <= threshold;
    } else {
      out["time_domain"] = nullptr;
      out["agreement"] = nullptr;
    }
    out["agreement_threshold_sem"] = threshold;
    if (model.kind == SpectrumModel::Kind::LorentzianDiff) {
      const double inf = std::numeric_limits<double>::infinity();
      out["limits"] = {
          {"gamma_inf", spectral_nr_predict(SpectrumModel::lorentzian_diff(model.nr0, inf), pulse).nr},
          {"gamma_small", spectral_nr_predict(SpectrumModel::lorentzian_diff(model.nr0, 2.0 * std::numbers::pi * 10.0),
                                              pulse).nr}};
    }
    if (s.contains("detection_efficiency")) {
      const double eta = s.at("detection_efficiency").get<double>();
      out["with_detection_loss"] = {{"eta", eta}, {"nr", apply_detection_loss(pred.nr, eta)}};
    }
  });
  write_file(run.out / "spectral.json", out.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// report: every stage in order, then a summary read back from the files
// ---------------------------------------------------------------------------

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw Failure(kIo, "cannot parse " + p.string() + ": " + e.what());
  }
}

void cmd_report(const Run& run) {
  const bool have_inputs = run.block("io").contains("near") || run.block("io").contains("far");
  if (!run.block("sim").empty() && !have_inputs) cmd_simulate(run);
  cmd_analyze_nr(run);
  cmd_analyze_epr(run);
  if (get<bool>(run.block("analysis"), "confidence", true)) cmd_confidence(run);
  if (!run.block("spectral").empty()) cmd_spectral(run);

  json rep = run.meta("report");
  const json nr = read_json(run.out / "nr_summary.json");
  const json epr = read_json(run.out / "epr_report.json");
  rep["epr"] = {{"verdict", epr.at("verdict")}, {"axes", epr.at("axes")}};
  if (nr.contains("fields") && nr["fields"].contains("near") && nr["fields"].contains("far") &&
      !nr["fields"]["near"]["plateau_nr"].is_null() && !nr["fields"]["far"]["plateau_nr"].is_null()) {
    const double a = nr["fields"]["near"]["plateau_nr"].get<double>();
    const double b = nr["fields"]["far"]["plateau_nr"].get<double>();
    const double sem = std::hypot(nr["fields"]["near"]["plateau_sem"].get<double>(),
                                  nr["fields"]["far"]["plateau_sem"].get<double>());
    stage(kReport, "report", [&] {
      const auto i = inseparability(a, b);
      // I is the sum of two independent plateau means; "significant" asks for
      // the bound to clear three standard errors.
      rep["inseparability"] = {{"nr_near", a},         {"nr_far", b},
                               {"value", i.value},     {"sem", sem},
                               {"entangled", i.entangled}, {"significant", i.value + 3.0 * sem < 2.0}};
    });
  }
  if (fs::exists(run.out / "confidence.json")) {
    const json c = read_json(run.out / "confidence.json");
    json axes = json::array();
    for (const auto& a : c.at("axes")) {
      axes.push_back(json{{"axis", a.at("axis")}, {"scaling_exponent", a.at("scaling_exponent")},
                      {"smallest_n_above_5", a.at("smallest_n_above_5")}});
    }
    rep["confidence"] = axes;
  }
  if (fs::exists(run.out / "spectral.json")) {
    const json s = read_json(run.out / "spectral.json");
    rep["spectral"] = {{"prediction", s.at("prediction").at("nr")}, {"agreement", s.at("agreement")}};
  }

  json files = json::array();
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(run.out)) {
    if (e.is_regular_file() && e.path().filename() != "report.json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) files.push_back(file_entry(run, p, read_file(p)));
  rep["files"] = files;
  write_file(run.out / "report.json", rep.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"twinbeam: twin-beam imaging simulation and EPR / squeezing analysis"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  app.footer(
      "Exit codes: 0 success, 1 usage, 2 config, 3 I/O, 10 simulate, 11 analyze-nr, 12 analyze-epr,\n"
      "13 confidence, 14 spectral, 15 report.");

  std::string config, out = "twinbeam_out";
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  app.add_option("--config", config, "JSON run configuration")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out, "output directory")->capture_default_str();
  app.add_option("--seed", seed, "override the config seed");
  app.add_option("--threads", threads, "worker threads (0: TWINBEAM_THREADS or hardware)");

  const std::vector<std::pair<const char*, std::function<void(const Run&)>>> commands{
      {"simulate", cmd_simulate},   {"analyze-epr", cmd_analyze_epr}, {"analyze-nr", cmd_analyze_nr},
      {"confidence", cmd_confidence}, {"spectral", cmd_spectral},     {"report", cmd_report}};
  const std::vector<const char*> help{"write simulated TBIM stacks and a manifest",
                                      "near/far cross-correlation fits and the EPR product",
                                      "noise ratio versus super-pixel size",
                                      "confidence level versus number of images",
                                      "spectral prediction with a time-domain check",
                                      "run every stage and summarize"};
  for (std::size_t i = 0; i < commands.size(); ++i) app.add_subcommand(commands[i].first, help[i]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (threads > 0) set_thread_count(threads);
  try {
    const Run run = load_run(config, seed, out);
    for (const auto& [name, fn] : commands) {
      if (app.got_subcommand(name)) fn(run);
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.what() << "\n";
    return f.code;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const json::exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kConfig;
  }
  return kOk;
}
