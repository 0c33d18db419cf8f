#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "decouple/checkpoint.hpp"
#include "decouple/error.hpp"
#include "decouple/evaluation.hpp"

namespace decouple {

namespace {

using nlohmann::ordered_json;

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::string exact(double v) { return fmt("%.17g", v); }

void check_tag(const std::string& tag, const char* what) {
    if (tag.find_first_of(",\"\n\r") != std::string::npos) {
        throw ValidationError(std::string("report: ") + what + " '" + tag + "' contains a reserved character");
    }
}

void validate(const EvalReport& report) {
    if (report.curves.empty()) {
        throw ValidationError("report: no curves (empty metric set)");
    }
    for (const auto& c : report.curves) {
        if (c.metric.empty()) {
            throw ValidationError("report: curve without a metric name");
        }
        check_tag(c.metric, "metric");
        check_tag(c.method, "method");
        check_tag(c.dataset, "dataset");
        if (c.points.empty() || c.points.front().first != 0) {
            throw ValidationError("report: curve " + c.method + "/" + c.metric + " must start at length 0");
        }
        for (std::size_t i = 0; i < c.points.size(); ++i) {
            if (!std::isfinite(c.points[i].second)) {
                throw ValidationError("report: non-finite value in " + c.method + "/" + c.metric);
            }
            if (i > 0 && c.points[i].first <= c.points[i - 1].first) {
                throw ValidationError("report: lengths not strictly increasing in " + c.method + "/" + c.metric);
            }
        }
    }
}

std::string timestamp(bool fixed) {
    if (fixed) {
        return "1970-01-01T00:00:00Z";
    }
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string render_csv(const EvalReport& report) {
    std::string out = "method,dataset,metric,length,value\n";
    for (const auto& c : report.curves) {
        for (const auto& [L, v] : c.points) {
            out += c.method + "," + c.dataset + "," + c.metric + "," + length_label(L) + "," + exact(v) + "\n";
        }
    }
    return out;
}

std::string render_summary(const EvalReport& report, bool fixed_timestamp) {
    ordered_json results = ordered_json::object();
    for (const auto& c : report.curves) {
        ordered_json curve = ordered_json::array();
        for (const auto& [L, v] : c.points) {
            ordered_json pt;
            if (L == kFullKnowledge) {
                pt["length"] = "full";
            } else {
                pt["length"] = L;
            }
            pt["value"] = v;
            curve.push_back(pt);
        }
        ordered_json entry;
        entry["curve"] = curve;
        entry["variance"] = c.points.size() >= 2 ? gap_variance(c) : 0.0;
        ordered_json endpoints = ordered_json::object();
        endpoints["0"] = c.points.front().second;
        if (c.points.back().first == kFullKnowledge) {
            endpoints["full"] = c.points.back().second;
        }
        entry["endpoints"] = endpoints;
        results[c.method][c.dataset][c.metric] = entry;
    }
    ordered_json doc;
    doc["generated_at"] = timestamp(fixed_timestamp);
    doc["results"] = results;
    ordered_json scalars = ordered_json::object();
    for (const auto& [k, v] : report.scalars) {
        scalars[k] = v;
    }
    doc["scalars"] = scalars;
    return doc.dump(2) + "\n";
}

std::string render_svg(const EvalReport& report, const std::string& metric) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
    std::vector<const GapCurve*> curves;
    std::set<std::size_t> grid_set;
    double lo = INFINITY;
    double hi = -INFINITY;
    for (const auto& c : report.curves) {
        if (c.metric != metric) {
            continue;
        }
        curves.push_back(&c);
        for (const auto& [L, v] : c.points) {
            grid_set.insert(L);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (hi - lo < 1e-12) {
        hi = lo + 1.0;
    }
    const std::vector<std::size_t> grid(grid_set.begin(), grid_set.end());
    const double W = 640, H = 400, left = 60, right = 160, top = 30, bottom = 50;
    const double pw = W - left - right, ph = H - top - bottom;
    auto xpos = [&](std::size_t L) {
        const auto i = static_cast<double>(std::find(grid.begin(), grid.end(), L) - grid.begin());
        return left + (grid.size() > 1 ? pw * i / static_cast<double>(grid.size() - 1) : pw / 2);
    };
    auto ypos = [&](double v) { return top + ph * (1.0 - (v - lo) / (hi - lo)); };

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << metric
      << " vs knowledge length</text>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
    for (std::size_t L : grid) {
        s << "<text x=\"" << fmt("%.1f", xpos(L)) << "\" y=\"" << top + ph + 18
          << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << length_label(L) << "</text>\n";
    }
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        s << "<text x=\"" << left - 6 << "\" y=\"" << fmt("%.1f", ypos(v) + 4)
          << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << fmt("%.3g", v) << "</text>\n";
    }
    s << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">knowledge length</text>\n";
    for (std::size_t i = 0; i < curves.size(); ++i) {
        const char* colour = palette[i % (sizeof palette / sizeof *palette)];
        s << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (const auto& [L, v] : curves[i]->points) {
            s << fmt("%.2f", xpos(L)) << "," << fmt("%.2f", ypos(v)) << " ";
        }
        s << "\"/>\n";
        const double ly = top + 16.0 * static_cast<double>(i);
        s << "<text x=\"" << left + pw + 10 << "\" y=\"" << fmt("%.1f", ly + 4) << "\" font-family=\"sans-serif\" "
          << "font-size=\"11\" fill=\"" << colour << "\">" << curves[i]->method
          << (curves[i]->dataset.empty() ? "" : " (" + curves[i]->dataset + ")") << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir, bool fixed_timestamp) {
    validate(report);
    std::vector<std::string> metrics;
    for (const auto& c : report.curves) {
        if (std::find(metrics.begin(), metrics.end(), c.metric) == metrics.end()) {
            metrics.push_back(c.metric);
        }
    }
    // Render everything first so a failure leaves no partial output.
    std::vector<std::pair<std::filesystem::path, std::string>> files;
    files.emplace_back(out_dir / "curves.csv", render_csv(report));
    files.emplace_back(out_dir / "summary.json", render_summary(report, fixed_timestamp));
    for (const auto& m : metrics) {
        files.emplace_back(out_dir / (m + ".svg"), render_svg(report, m));
    }
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) {
        throw IoError("cannot create report directory " + out_dir.string());
    }
    for (const auto& [path, contents] : files) {
        write_file_atomic(path, contents);
    }
}

std::vector<GapCurve> read_curves_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::string line;
    if (!std::getline(in, line) || line != "method,dataset,metric,length,value") {
        throw ValidationError(path.string() + ": unexpected header");
    }
    std::vector<GapCurve> curves;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) {
            cols.push_back(col);
        }
        if (cols.size() != 5) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected 5 columns");
        }
        const std::size_t L = parse_length(cols[3]);
        const double v = std::strtod(cols[4].c_str(), nullptr);
        if (curves.empty() || curves.back().method != cols[0] || curves.back().dataset != cols[1] ||
            curves.back().metric != cols[2]) {
            curves.push_back(GapCurve{cols[2], cols[0], cols[1], {}});
        }
        curves.back().points.emplace_back(L, v);
    }
    return curves;
}

}  // namespace decouple
