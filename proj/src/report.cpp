#include "mgc/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "mgc/errors.hpp"

namespace mgc::report {

namespace fs = std::filesystem;

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
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

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string tok;
  while (std::getline(ss, tok, '\t')) out.push_back(tok);
  return out;
}

double parse_double(const std::string& s, const fs::path& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw ValidationError("malformed number '" + s + "' in " + where.string());
  }
}

std::optional<double> parse_opt(const std::string& s, const fs::path& where) {
  if (s == "-") return std::nullopt;
  return parse_double(s, where);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series) {
  const double W = 640, H = 400, ml = 70, mr = 150, mt = 40, mb = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pw = W - ml - mr, ph = H - mt - mb;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return mt + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  o << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = y0 + (y1 - y0) * t / 4.0, xv = x0 + (x1 - x0) * t / 4.0;
    o << "<line x1=\"" << ml << "\" x2=\"" << ml + pw << "\" y1=\"" << py(yv) << "\" y2=\"" << py(yv) << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
    o << "<text x=\"" << px(xv) << "\" y=\"" << mt + ph + 18 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
  }
  o << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  o << "<text transform=\"translate(16," << mt + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << escape(y_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size(); ++i) {
      if (std::isfinite(series[s].y[i])) o << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
    }
    o << "\"/>\n";
    const double ly = mt + 10 + 18.0 * s;
    o << "<line x1=\"" << ml + pw + 10 << "\" x2=\"" << ml + pw + 30 << "\" y1=\"" << ly << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << ml + pw + 35 << "\" y=\"" << ly + 4 << "\">" << escape(series[s].label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string confusion_chart(const std::string& title, const std::vector<std::vector<std::size_t>>& confusion) {
  const std::size_t k = confusion.size();
  const double cell = std::max(24.0, 360.0 / std::max<std::size_t>(k, 1)), m = 60;
  const double W = m + cell * k + 20, H = m + cell * k + 40;
  std::size_t peak = 1;
  for (const auto& r : confusion)
    for (auto v : r) peak = std::max(peak, v);
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n";
  o << "<text x=\"" << m + cell * k / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\">predicted</text>\n";
  o << "<text transform=\"translate(14," << m + cell * k / 2 << ") rotate(-90)\" text-anchor=\"middle\">label</text>\n";
  for (std::size_t i = 0; i < k; ++i) {
    o << "<text x=\"" << m - 6 << "\" y=\"" << m + cell * (i + 0.5) + 4 << "\" text-anchor=\"end\">" << i << "</text>\n";
    o << "<text x=\"" << m + cell * (i + 0.5) << "\" y=\"" << m - 6 << "\" text-anchor=\"middle\">" << i << "</text>\n";
    for (std::size_t j = 0; j < k; ++j) {
      const double f = static_cast<double>(confusion[i][j]) / static_cast<double>(peak);
      const int shade = static_cast<int>(std::lround(255 * (1.0 - f)));
      o << "<rect x=\"" << m + cell * j << "\" y=\"" << m + cell * i << "\" width=\"" << cell << "\" height=\"" << cell
        << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\" stroke=\"#999\"/>\n";
      o << "<text x=\"" << m + cell * (j + 0.5) << "\" y=\"" << m + cell * (i + 0.5) + 4 << "\" text-anchor=\"middle\" fill=\""
        << (f > 0.6 ? "white" : "black") << "\">" << confusion[i][j] << "</text>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<trainer::EpochRecord> read_run_record(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (split_tabs(line).size() != 11 || line.rfind("epoch\t", 0) != 0) throw ValidationError(path.string() + " is not a run record");
  std::vector<trainer::EpochRecord> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 11) throw ValidationError("malformed run record row in " + path.string());
    trainer::EpochRecord e;
    e.epoch = static_cast<int>(parse_double(f[0], path));
    e.lr = parse_double(f[1], path);
    e.l_ce = parse_double(f[2], path);
    e.l_pr = parse_double(f[3], path);
    e.l_total = parse_double(f[4], path);
    e.train.rgb = parse_opt(f[5], path);
    e.train.pose = parse_opt(f[6], path);
    e.train.fused = parse_double(f[7], path);
    e.val.rgb = parse_opt(f[8], path);
    e.val.pose = parse_opt(f[9], path);
    e.val.fused = parse_double(f[10], path);
    rows.push_back(e);
  }
  return rows;
}

std::map<std::pair<std::string, int>, Series> read_drift(const fs::path& path) {
  std::map<std::pair<std::string, int>, Series> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 4) throw ValidationError("malformed drift row in " + path.string());
    const int k = static_cast<int>(parse_double(f[2], path));
    auto& s = out[{f[1], k}];
    s.label = f[1] + " P" + std::to_string(k);
    s.x.push_back(parse_double(f[0], path));
    s.y.push_back(parse_double(f[3], path));
  }
  return out;
}

std::vector<std::vector<std::size_t>> read_confusion(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<std::size_t>> m;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    std::vector<std::size_t> row;
    for (std::size_t j = 1; j < f.size(); ++j) row.push_back(static_cast<std::size_t>(parse_double(f[j], path)));
    m.push_back(std::move(row));
  }
  for (const auto& r : m)
    if (r.size() != m.size()) throw ValidationError("confusion matrix in " + path.string() + " is not square");
  return m;
}

std::string write_report(const fs::path& run_dir, const fs::path& out_dir) {
  const auto rows = read_run_record(run_dir / "run_record.tsv");
  if (rows.empty()) throw ValidationError("run record in " + run_dir.string() + " has no epochs");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string());

  Series ce{"L_CE", {}, {}}, pr{"L_PR", {}, {}}, total{"L_total", {}, {}};
  Series tr{"train fused", {}, {}}, va{"val fused", {}, {}}, vr{"val rgb", {}, {}}, vp{"val pose", {}, {}};
  for (const auto& e : rows) {
    const double x = e.epoch;
    for (auto* s : {&ce, &pr, &total, &tr, &va}) s->x.push_back(x);
    ce.y.push_back(e.l_ce);
    pr.y.push_back(e.l_pr);
    total.y.push_back(e.l_total);
    tr.y.push_back(e.train.fused);
    va.y.push_back(e.val.fused);
    if (e.val.rgb) vr.x.push_back(x), vr.y.push_back(*e.val.rgb);
    if (e.val.pose) vp.x.push_back(x), vp.y.push_back(*e.val.pose);
  }
  write_text(out_dir / "loss.svg", line_chart("Training loss", "epoch", "loss", {ce, pr, total}));
  std::vector<Series> acc{tr, va};
  if (!vr.x.empty()) acc.push_back(vr);
  if (!vp.x.empty()) acc.push_back(vp);
  write_text(out_dir / "accuracy.svg", line_chart("Top-1 accuracy", "epoch", "top-1", acc));

  std::ostringstream md;
  md << "# Run report: " << run_dir.filename().string() << "\n\n";
  md << "![loss](loss.svg)\n\n![accuracy](accuracy.svg)\n\n";

  const auto drift = read_drift(run_dir / "prototype_drift.tsv");
  if (!drift.empty()) {
    std::vector<Series> ds;
    for (const auto& [key, s] : drift) ds.push_back(s);
    write_text(out_dir / "drift.svg", line_chart("Prototype drift", "epoch", "cosine to initial prototype", ds));
    md << "![prototype drift](drift.svg)\n\n";
  }

  auto best = std::max_element(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.val.fused < b.val.fused; });
  md << "| epoch | lr | L_CE | L_PR | L_total | train fused | val fused |\n|---|---|---|---|---|---|---|\n";
  for (const auto* e : {&rows.front(), &*best, &rows.back()}) {
    md << "| " << e->epoch << " | " << num(e->lr) << " | " << num(e->l_ce) << " | " << num(e->l_pr) << " | "
       << num(e->l_total) << " | " << pct(e->train.fused) << " | " << pct(e->val.fused) << " |\n";
  }
  md << "\nRows: first epoch, best validation epoch, last epoch. Accuracies are top-1 in percent.\n";

  if (fs::exists(run_dir / "confusion_test.tsv")) {
    const auto cm = read_confusion(run_dir / "confusion_test.tsv");
    write_text(out_dir / "confusion.svg", confusion_chart("Test confusion (fused)", cm));
    std::size_t hits = 0, n = 0;
    for (std::size_t i = 0; i < cm.size(); ++i)
      for (std::size_t j = 0; j < cm.size(); ++j) {
        n += cm[i][j];
        if (i == j) hits += cm[i][j];
      }
    md << "\nTest top-1 (fused, best checkpoint): " << pct(n ? static_cast<double>(hits) / n : 0.0) << "%\n\n";
    md << "![confusion](confusion.svg)\n";
  }
  write_text(out_dir / "report.md", md.str());
  return md.str();
}

}  // namespace mgc::report
