#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "moclseg/pipeline.hpp"

namespace moclseg {

using json = nlohmann::json;

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << v;
    return os.str();
}

std::string fmt_p(double p) {
    if (std::isnan(p)) return "degenerate";
    std::ostringstream os;
    os << std::scientific << std::setprecision(3) << p;
    return os.str();
}

const cv::Scalar kSeriesColors[] = {
    {180, 60, 40}, {40, 120, 200}, {40, 160, 60}, {140, 60, 170}, {30, 170, 200}, {90, 90, 90},
};

// fraction on x (log-ish spread), metric on y
void plot_metric(const MatrixResult& result, const std::string& metric, const fs::path& file) {
    const int W = 640, H = 480, ml = 70, mr = 20, mt = 40, mb = 60;
    cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));

    std::vector<double> fracs;
    for (const auto& r : result.rows) fracs.push_back(r.fraction);
    double fmin = *std::min_element(fracs.begin(), fracs.end());
    double fmax = *std::max_element(fracs.begin(), fracs.end());
    if (fmin == fmax) {
        fmin *= 0.5;
        fmax *= 1.5;
    }

    auto px = [&](double f) {
        double t = (std::log10(f) - std::log10(fmin)) / (std::log10(fmax) - std::log10(fmin));
        return ml + static_cast<int>(t * (W - ml - mr));
    };
    auto py = [&](double v) { return H - mb - static_cast<int>(v * (H - mt - mb)); };

    cv::rectangle(img, {ml, mt}, {W - mr, H - mb}, {0, 0, 0}, 1);
    for (int g = 0; g <= 10; ++g) {
        double v = g / 10.0;
        cv::line(img, {ml - 4, py(v)}, {ml, py(v)}, {0, 0, 0}, 1);
        cv::putText(img, fmt(v).substr(0, 3), {8, py(v) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                    {0, 0, 0}, 1);
    }
    cv::putText(img, metric + " vs training fraction", {ml, mt - 12}, cv::FONT_HERSHEY_SIMPLEX,
                0.6, {0, 0, 0}, 1);
    cv::putText(img, "training fraction (log scale)", {W / 2 - 100, H - 15},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1);

    // group series by (method, label condition)
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    for (const auto& r : result.rows) {
        auto it = r.metrics.find(metric);
        if (it == r.metrics.end()) continue;
        series[r.method + " / " + r.label_condition].push_back({r.fraction, it->second});
    }
    int si = 0;
    int legend_y = mt + 18;
    for (auto& [name, pts] : series) {
        std::sort(pts.begin(), pts.end());
        cv::Scalar color = kSeriesColors[static_cast<size_t>(si) % std::size(kSeriesColors)];
        for (size_t i = 0; i < pts.size(); ++i) {
            cv::Point p(px(pts[i].first), py(pts[i].second));
            cv::circle(img, p, 4, color, -1);
            if (i > 0)
                cv::line(img, {px(pts[i - 1].first), py(pts[i - 1].second)}, p, color, 2);
        }
        cv::putText(img, name, {ml + 10, legend_y}, cv::FONT_HERSHEY_SIMPLEX, 0.45, color, 1);
        legend_y += 18;
        ++si;
    }
    cv::imwrite(file.string(), img);
}

} // namespace

void emit_report(const MatrixResult& result, const fs::path& out_dir) {
    if (result.rows.empty()) throw ValidationError("report: no completed records");
    fs::create_directories(out_dir);

    // results_table.json
    json jt;
    jt["rows"] = json::array();
    for (const auto& r : result.rows) {
        json jr;
        jr["method"] = r.method;
        jr["label"] = r.label_condition;
        jr["fraction"] = r.fraction;
        jr["reference"] = r.is_reference;
        for (const auto& m : report_metric_columns()) {
            auto it = r.metrics.find(m);
            jr[m] = it == r.metrics.end() ? 0.0 : it->second;
        }
        json jp = json::object();
        for (const auto& [m, p] : r.p_vs_ref)
            jp[m] = std::isnan(p) ? json("degenerate") : json(p);
        jr["p_vs_ref"] = jp;
        jt["rows"].push_back(jr);
    }
    {
        std::ofstream out(out_dir / "results_table.json");
        out << jt.dump(2) << "\n";
    }

    // results_table.csv, fixed column order
    {
        std::ofstream out(out_dir / "results_table.csv");
        out << "method,label,fraction";
        for (const auto& m : report_metric_columns()) out << "," << m;
        out << ",ref";
        for (const auto& m : report_metric_columns()) out << ",p_" << m;
        out << "\n";
        for (const auto& r : result.rows) {
            out << r.method << "," << r.label_condition << "," << fmt(r.fraction);
            for (const auto& m : report_metric_columns()) {
                auto it = r.metrics.find(m);
                out << "," << fmt(it == r.metrics.end() ? 0.0 : it->second);
            }
            out << "," << (r.is_reference ? "Ref." : "");
            for (const auto& m : report_metric_columns()) {
                auto it = r.p_vs_ref.find(m);
                out << "," << (it == r.p_vs_ref.end() ? "" : fmt_p(it->second));
            }
            out << "\n";
        }
    }

    fs::create_directories(out_dir / "plots");
    for (const auto& m : report_metric_columns())
        plot_metric(result, m, out_dir / "plots" / (m + ".png"));
}

} // namespace moclseg
