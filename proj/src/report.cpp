#include "dfd/report.hpp"

#include "dfd/archive.hpp"
#include "dfd/config_fields.hpp"
#include "dfd/csv.hpp"
#include "dfd/sweep.hpp"
#include "dfd/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace dfd {
namespace fs = std::filesystem;

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string fixed(double v, int p) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(p) << v;
  return o.str();
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

/// ~5 round tick values covering [lo, hi].
std::vector<double> ticks(double lo, double hi) {
  const double span = hi - lo;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * span; t += step) out.push_back(std::abs(t) < 1e-12 ? 0.0 : t);
  return out;
}

std::string tick_label(double v) {
  std::ostringstream o;
  o << std::setprecision(4) << v;
  return o.str();
}

std::string md_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::string out = "|";
  for (const auto& h : header) out += " " + h + " |";
  out += "\n|";
  for (std::size_t i = 0; i < header.size(); ++i) out += i == 0 ? " --- |" : " ---: |";
  out += "\n";
  for (const auto& row : rows) {
    out += "|";
    for (const auto& c : row) out += " " + c + " |";
    out += "\n";
  }
  return out;
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const std::exception& e) {
    throw ValidationError("cannot read " + path.string() + ": " + e.what());
  }
}

std::string opt_fixed(const nlohmann::json& v, int p) { return v.is_number() ? fixed(v.get<double>(), p) : "n/a"; }

std::string slug(const fs::path& rel) {
  std::string s = rel.generic_string();
  if (s.empty() || s == ".") return "root";
  std::replace_if(s.begin(), s.end(), [](char c) { return !std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_'; }, '_');
  return s;
}

std::vector<std::pair<double, double>> read_xy(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<double, double>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = parse_csv_line(line);
    if (f.size() >= 2) out.emplace_back(std::stod(f[0]), std::stod(f[1]));
  }
  return out;
}

void add_curve_section(Report& rep, const fs::path& run_dir, const std::string& title, const std::string& stem) {
  const auto curve = read_curve_csv(run_dir / "curve.csv");
  if (curve.empty()) return;
  PlotSeries train_loss{"train loss", {}, {}}, val_loss{"val loss", {}, {}}, val_acc{"val accuracy", {}, {}},
      train_acc{"train accuracy", {}, {}};
  for (const auto& e : curve) {
    train_loss.x.push_back(e.epoch);
    train_loss.y.push_back(e.train_loss);
    val_loss.x.push_back(e.epoch);
    val_loss.y.push_back(e.val_loss);
    val_acc.x.push_back(e.epoch);
    val_acc.y.push_back(e.val_accuracy);
    train_acc.x.push_back(e.epoch);
    train_acc.y.push_back(e.train_accuracy);
  }
  const std::string loss_file = stem + "_loss.svg", acc_file = stem + "_accuracy.svg";
  rep.figures[loss_file] = svg_line_plot(title + " loss", "epoch", "cross-entropy", {train_loss, val_loss});
  rep.figures[acc_file] = svg_line_plot(title + " accuracy", "epoch", "accuracy", {train_acc, val_acc});

  std::string& md = rep.markdown;
  md += "### " + title + "\n\n";
  if (fs::exists(run_dir / "result.json")) {
    const auto r = read_json(run_dir / "result.json");
    md += "Best epoch " + std::to_string(r.at("best_epoch").get<int>()) + ", best validation accuracy " +
          fixed(r.at("best_val_accuracy").get<double>(), 3) + (r.value("stopped_early", false) ? ", stopped early" : "") +
          ", wall time " + fixed(r.value("wall_time", 0.0), 1) + " s.\n\n";
  } else {
    md += "Run not finished (" + std::to_string(curve.size()) + " epochs recorded).\n\n";
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : curve) {
    rows.push_back({std::to_string(e.epoch), fixed(e.train_loss, 4), fixed(e.val_loss, 4), fixed(e.val_accuracy, 3),
                    tick_label(e.lr)});
  }
  md += md_table({"epoch", "train loss", "val loss", "val acc", "lr"}, rows) + "\n";
  md += "![" + title + " loss](" + loss_file + ")\n![" + title + " accuracy](" + acc_file + ")\n\n";
}

}  // namespace

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series) {
  const double W = 640, H = 400, left = 70, right = 160, top = 40, bottom = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << std::fixed << std::setprecision(2);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' '
    << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape_xml(title) << "</text>\n";
  for (double t : ticks(x0, x1)) {
    o << "<line x1=\"" << px(t) << "\" y1=\"" << top << "\" x2=\"" << px(t) << "\" y2=\"" << top + ph
      << "\" stroke=\"#e5e5e5\"/>\n<text x=\"" << px(t) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">"
      << tick_label(t) << "</text>\n";
  }
  for (double t : ticks(y0, y1)) {
    o << "<line x1=\"" << left << "\" y1=\"" << py(t) << "\" x2=\"" << left + pw << "\" y2=\"" << py(t)
      << "\" stroke=\"#e5e5e5\"/>\n<text x=\"" << left - 6 << "\" y=\"" << py(t) + 4 << "\" text-anchor=\"end\">"
      << tick_label(t) << "</text>\n";
  }
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << escape_xml(x_label)
    << "</text>\n";
  o << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << escape_xml(y_label)
    << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) o << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    }
    o << "\"/>\n";
    const double ly = top + 14 + 18 * static_cast<double>(k);
    o << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly - 4
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n<text x=\"" << left + pw + 38 << "\" y=\"" << ly << "\">"
      << escape_xml(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

Report build_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("no runs found: " + dir.string() + " is not a directory");
  Report rep;
  std::string& md = rep.markdown;
  md = "# Report: " + fs::absolute(dir).lexically_normal().filename().string() + "\n\n";
  bool found = false;

  std::vector<fs::path> run_dirs, eval_dirs, profile_files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename();
    if (name == "curve.csv") run_dirs.push_back(entry.path().parent_path());
    if (name == "eval.json") eval_dirs.push_back(entry.path().parent_path());
    if (name == "profile.json") profile_files.push_back(entry.path());
  }
  std::sort(run_dirs.begin(), run_dirs.end());
  std::sort(eval_dirs.begin(), eval_dirs.end());
  std::sort(profile_files.begin(), profile_files.end());

  if (fs::exists(dir / "sweep.json")) {
    found = true;
    const auto results = load_sweep_results(dir);
    const TableText table = emit_table(results);
    md += "## Best validation accuracies\n\nRows: scheduler and initial learning rate. Columns: architecture and "
          "initialization.\n\n```\n" + table.txt + "```\n\n";
    std::size_t done = 0;
    std::vector<std::vector<std::string>> problems;
    for (const auto& r : results) {
      if (r.status == CellStatus::done) {
        ++done;
      } else {
        problems.push_back({r.key.id(), to_string(r.status), r.message});
      }
    }
    md += std::to_string(done) + " of " + std::to_string(results.size()) + " cells completed.\n\n";
    if (!problems.empty()) md += md_table({"cell", "status", "detail"}, problems) + "\n";
    if (done > 0) {
      const auto best = select_best_per_arch(results, 1);
      std::vector<std::vector<std::string>> rows;
      for (const auto& b : best) rows.push_back({to_string(b.key.arch), b.key.id(), fixed(b.best_val_accuracy, 3)});
      md += "## Best cell per architecture\n\n" + md_table({"architecture", "cell", "best val accuracy"}, rows) + "\n";
      md += "## Learning curves\n\n";
      for (const auto& b : best) {
        fs::path run = b.run_dir;
        if (!fs::exists(run / "curve.csv") && fs::exists(run / "seed-0" / "curve.csv")) run /= "seed-0";
        if (fs::exists(run / "curve.csv")) add_curve_section(rep, run, b.key.id(), "curve_" + slug(b.key.id()));
      }
    }
  } else if (!run_dirs.empty()) {
    found = true;
    md += "## Training runs\n\n";
    for (const auto& run : run_dirs) {
      const fs::path rel = fs::relative(run, dir);
      add_curve_section(rep, run, rel.empty() || rel == "." ? std::string("run") : rel.generic_string(),
                        "curve_" + slug(rel));
    }
  }

  if (!eval_dirs.empty()) {
    found = true;
    md += "## Evaluation\n\n";
    std::vector<std::vector<std::string>> rows;
    for (const auto& e : eval_dirs) {
      const auto j = read_json(e / "eval.json");
      const std::string name = slug(fs::relative(e, dir));
      rows.push_back({name, j.value("split", std::string("?")), opt_fixed(j.at("accuracy"), 3), opt_fixed(j.at("roc_auc"), 3),
                      opt_fixed(j.at("average_precision"), 3), opt_fixed(j.at("recall_at_precision_1"), 3),
                      std::to_string(j.at("n_real").get<long>()), std::to_string(j.at("n_fake").get<long>())});
      std::vector<PlotSeries> roc, pr;
      if (fs::exists(e / "roc.csv")) {
        PlotSeries s{name, {}, {}};
        for (auto [x, y] : read_xy(e / "roc.csv")) s.x.push_back(x), s.y.push_back(y);
        rep.figures["roc_" + name + ".svg"] =
            svg_line_plot("ROC " + name, "false positive rate", "true positive rate", {s, {"chance", {0, 1}, {0, 1}}});
        md += "![ROC " + name + "](roc_" + name + ".svg)\n";
      }
      if (fs::exists(e / "pr.csv")) {
        PlotSeries s{name, {}, {}};
        for (auto [x, y] : read_xy(e / "pr.csv")) s.x.push_back(x), s.y.push_back(y);
        rep.figures["pr_" + name + ".svg"] = svg_line_plot("Precision-recall " + name, "recall", "precision", {s});
        md += "![PR " + name + "](pr_" + name + ".svg)\n";
      }
    }
    md += "\n" + md_table({"evaluation", "split", "accuracy", "ROC AUC", "average precision", "recall @ precision 1",
                           "real", "fake"},
                          rows) +
          "\n";
  }

  if (!profile_files.empty()) {
    found = true;
    md += "## Computational cost\n\n";
    std::vector<std::vector<std::string>> rows;
    std::string convention, hardware;
    for (const auto& p : profile_files) {
      const auto j = read_json(p);
      std::string flops;
      for (const auto& [side, g] : j.at("gflops_by_input_side").items()) {
        flops += (flops.empty() ? "" : ", ") + fixed(g.get<double>(), 2) + " @" + side;
      }
      rows.push_back({j.at("model").get<std::string>(), fixed(j.at("params_millions").get<double>(), 2), flops,
                      j.contains("latency_ms_mean") ? fixed(j["latency_ms_mean"].get<double>(), 2) + " ± " +
                                                          fixed(j["latency_ms_std"].get<double>(), 2)
                                                    : "n/a"});
      convention = j.value("flop_convention", "");
      hardware = j.value("hardware", "");
    }
    md += md_table({"model", "params (M)", "GFLOPs", "latency ms"}, rows) + "\n";
    md += "FLOP convention: " + convention + ". Latency: batch size 1, preprocessing excluded, on " + hardware + ".\n\n";
  }

  if (!found) throw ValidationError("no runs found in " + dir.string());
  return rep;
}

fs::path write_report(const Report& report, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  for (const auto& [name, svg] : report.figures) write_file_atomic(out_dir / name, svg);
  const fs::path path = out_dir / "report.md";
  write_file_atomic(path, report.markdown);
  return path;
}

}  // namespace dfd
