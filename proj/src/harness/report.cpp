#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "dprune/csv.hpp"
#include "dprune/experiment.hpp"

namespace dprune::harness {

namespace {

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::vector<std::string> x_text, y_text;  // values as written in the CSV
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else if (c == '"') out += "&quot;";
    else out += c;
  }
  return out;
}

std::string line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                      const std::vector<Series>& series) {
  constexpr double W = 640, H = 420, L = 70, R = 170, T = 40, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1;
  if (!(y0 <= y1)) y0 = 0, y1 = 1;
  if (x0 == x1) x0 -= 0.5, x1 += 0.5;
  if (y0 == y1) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
  o << "<g class=\"axes\" stroke=\"black\"><line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\""
    << H - B << "\"/><line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\"/></g>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    o << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"10\">" << num(xv)
      << "</text>\n";
    o << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 3 << "\" text-anchor=\"end\" font-size=\"10\">" << num(yv)
      << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << esc(xlabel) << "</text>\n";
  o << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
    << (T + H - B) / 2 << ")\">" << esc(ylabel) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % 8];
    o << "<g class=\"series\" data-label=\"" << esc(s.label) << "\" stroke=\"" << color << "\" fill=\"" << color
      << "\">\n";
    if (s.x.size() > 1) {
      o << "<polyline fill=\"none\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) o << (i ? " " : "") << px(s.x[i]) << "," << py(s.y[i]);
      o << "\"/>\n";
    }
    for (std::size_t i = 0; i < s.x.size(); ++i)
      o << "<circle class=\"point\" cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" data-x=\""
        << s.x_text[i] << "\" data-y=\"" << s.y_text[i] << "\"/>\n";
    o << "</g>\n";
    o << "<text x=\"" << W - R + 12 << "\" y=\"" << T + 14 * (k + 1) << "\" font-size=\"11\" fill=\"" << color << "\">"
      << esc(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("report: cannot write '" + path.string() + "'");
  f << text;
}

void add_point(Series& s, const CsvTable& t, std::size_t row, const std::string& xc, const std::string& yc) {
  s.x.push_back(t.value(row, xc));
  s.y.push_back(t.value(row, yc));
  s.x_text.push_back(t.rows[row][t.column(xc)]);
  s.y_text.push_back(t.rows[row][t.column(yc)]);
}

// Tolerates a zero-byte file as a table without rows.
CsvTable read_maybe_empty(const fs::path& p) {
  if (fs::file_size(p) == 0) return {};
  return read_csv(p);
}

std::string heatmap(const CsvTable& t) {
  std::vector<std::string> layers, pairs;
  std::map<std::pair<std::string, std::string>, std::string> cell;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string layer = t.rows[r][t.column("layer")];
    const std::string pair = t.rows[r][t.column("batch_a")] + "-" + t.rows[r][t.column("batch_b")];
    if (std::find(layers.begin(), layers.end(), layer) == layers.end()) layers.push_back(layer);
    if (std::find(pairs.begin(), pairs.end(), pair) == pairs.end()) pairs.push_back(pair);
    cell[{layer, pair}] = t.rows[r][t.column("pearson")];
  }
  constexpr double cw = 56, ch = 22, L = 170, T = 60;
  const double W = L + cw * std::max<std::size_t>(pairs.size(), 1) + 20, H = T + ch * layers.size() + 20;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">Importance correlation between "
       "batches</text>\n";
  for (std::size_t j = 0; j < pairs.size(); ++j)
    o << "<text x=\"" << L + cw * (j + 0.5) << "\" y=\"" << T - 8 << "\" text-anchor=\"middle\" font-size=\"10\">"
      << esc(pairs[j]) << "</text>\n";
  for (std::size_t i = 0; i < layers.size(); ++i) {
    o << "<text x=\"" << L - 6 << "\" y=\"" << T + ch * (i + 0.5) + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
      << esc(layers[i]) << "</text>\n";
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      auto it = cell.find({layers[i], pairs[j]});
      if (it == cell.end()) continue;
      double v = 0;
      std::istringstream(it->second) >> v;
      const double c = std::clamp((v + 1) / 2, 0.0, 1.0);
      const int red = static_cast<int>(255 * (1 - c)), green = static_cast<int>(200 * c + 55 * (1 - c));
      o << "<rect x=\"" << L + cw * j << "\" y=\"" << T + ch * i << "\" width=\"" << cw << "\" height=\"" << ch
        << "\" fill=\"rgb(" << red << "," << green << ",120)\" data-value=\"" << it->second << "\"/>\n";
      o << "<text x=\"" << L + cw * (j + 0.5) << "\" y=\"" << T + ch * (i + 0.5) + 4
        << "\" text-anchor=\"middle\" font-size=\"10\">" << esc(it->second.substr(0, 6)) << "</text>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace

void run_report(const fs::path& run_dir) {
  std::vector<std::string> missing;
  for (const char* f : {"train_metrics.csv", "spectra.csv", "diagnostics.csv", "stability.csv"})
    if (!fs::exists(run_dir / f)) missing.push_back(f);
  std::vector<fs::path> round_files;
  if (fs::is_directory(run_dir))
    for (const auto& e : fs::directory_iterator(run_dir)) {
      const std::string n = e.path().filename().string();
      if (n.rfind("rounds_", 0) == 0 && e.path().extension() == ".csv") round_files.push_back(e.path());
    }
  std::sort(round_files.begin(), round_files.end());
  if (round_files.empty()) missing.push_back("rounds_<method>.csv");
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw std::runtime_error("report: missing CSVs in '" + run_dir.string() + "': " + list);
  }

  std::vector<std::pair<std::string, std::string>> summary;

  {
    const auto t = read_maybe_empty(run_dir / "spectra.csv");
    std::map<std::pair<int, int>, Series> by;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const int s = static_cast<int>(t.value(r, "scale")), k = static_cast<int>(t.value(r, "index"));
      if (k >= 3) continue;
      auto& series = by[{s, k}];
      series.label = "scale " + std::to_string(s) + " lambda" + std::to_string(k);
      add_point(series, t, r, "epoch", "eigenvalue");
    }
    std::vector<Series> v;
    for (auto& [key, s] : by) v.push_back(std::move(s));
    write_text(run_dir / "spectrum.svg", line_plot("Leading discriminant eigenvalues", "epoch", "eigenvalue", v));
  }
  {
    const auto t = read_maybe_empty(run_dir / "diagnostics.csv");
    std::map<int, Series> by;
    std::map<int, std::size_t> last;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const int s = static_cast<int>(t.value(r, "scale"));
      by[s].label = "scale " + std::to_string(s);
      add_point(by[s], t, r, "epoch", "offdiag_ratio");
      last[s] = r;
    }
    std::vector<Series> v;
    for (auto& [s, series] : by) v.push_back(std::move(series));
    write_text(run_dir / "offdiag.svg", line_plot("Off-diagonal energy of S_t", "epoch", "off-diagonal ratio", v));
    for (const auto& [s, r] : last)
      for (const char* c : {"offdiag_ratio", "top_mass", "alignment"})
        summary.emplace_back("scale" + std::to_string(s) + "." + c, t.rows[r][t.column(c)]);
  }
  {
    const auto t = read_maybe_empty(run_dir / "train_metrics.csv");
    if (!t.rows.empty()) summary.emplace_back("final_val_map", t.rows.back()[t.column("val_map")]);
  }
  {
    std::vector<Series> v;
    for (const auto& f : round_files) {
      const auto t = read_maybe_empty(f);
      Series s;
      s.label = f.stem().string().substr(7);
      for (std::size_t r = 0; r < t.rows.size(); ++r) add_point(s, t, r, "realized_rate", "map");
      if (!t.rows.empty()) {
        summary.emplace_back(s.label + ".final_rate", s.x_text.back());
        summary.emplace_back(s.label + ".final_map", s.y_text.back());
      }
      v.push_back(std::move(s));
    }
    write_text(run_dir / "map_vs_rate.svg", line_plot("mAP vs parameter pruning rate", "pruning rate", "val mAP", v));
  }
  {
    const auto t = read_maybe_empty(run_dir / "stability.csv");
    write_text(run_dir / "stability.svg", heatmap(t));
    double lo = 1;
    for (std::size_t r = 0; r < t.rows.size(); ++r) lo = std::min(lo, t.value(r, "pearson"));
    if (!t.rows.empty()) summary.emplace_back("min_batch_correlation", num(lo));
  }
  CsvWriter out(run_dir / "summary.csv", {"metric", "value"});
  for (const auto& [k, v] : summary) out.row({k, v});
}

}  // namespace dprune::harness
