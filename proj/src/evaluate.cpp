#include "lungquant/evaluate.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "lungquant/core/errors.hpp"

namespace lungquant::eval {

namespace {

using nlohmann::json;

std::string fmt_double(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, p);
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

double volume_of(const quant::QuantReport& r, std::size_t type) {
    switch (type) {
        case 0: return r.ggo_ml;
        case 1: return r.high_opacity_ml;
        default: return r.total_pneumonia_ml;
    }
}

json meansd_json(const stats::MeanSd& m) {
    json j;
    j["mean"] = m.mean;
    j["sd"] = m.has_sd ? json(m.sd) : json(nullptr);
    return j;
}

// Shared panel geometry for the SVG plots.
struct Panel {
    double x0, y0, w, h;          // pixel box
    double dx0, dx1, dy0, dy1;    // data ranges

    double px(double x) const { return x0 + (x - dx0) / (dx1 - dx0) * w; }
    double py(double y) const { return y0 + h - (y - dy0) / (dy1 - dy0) * h; }
};

void expand_range(double& lo, double& hi) {
    if (lo == hi) {
        lo -= 1.0;
        hi += 1.0;
    } else {
        double pad = 0.05 * (hi - lo);
        lo -= pad;
        hi += pad;
    }
}

void svg_header(std::ofstream& out, int width, int height) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
        << "\" height=\"" << height << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
}

void svg_panel_frame(std::ofstream& out, const Panel& p, const std::string& title) {
    out << "<rect x=\"" << p.x0 << "\" y=\"" << p.y0 << "\" width=\"" << p.w
        << "\" height=\"" << p.h << "\" fill=\"none\" stroke=\"black\"/>\n";
    out << "<text x=\"" << p.x0 + p.w / 2 << "\" y=\"" << p.y0 - 6
        << "\" text-anchor=\"middle\">" << title << "</text>\n";
    out << "<text x=\"" << p.x0 << "\" y=\"" << p.y0 + p.h + 12 << "\">"
        << fmt_double(p.dx0) << "</text>\n";
    out << "<text x=\"" << p.x0 + p.w << "\" y=\"" << p.y0 + p.h + 12
        << "\" text-anchor=\"end\">" << fmt_double(p.dx1) << "</text>\n";
}

}  // namespace

double dice(const volio::LabelMask& pred, const volio::LabelMask& gt,
            volio::ClassCode class_code) {
    if (!(pred.shape() == gt.shape())) throw DataError("dice: shape mismatch");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        bool p = pred.labels[i] == class_code;
        bool g = gt.labels[i] == class_code;
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
    }
    if (tp + fp + fn == 0) return 1.0;  // absent from both masks
    return 2.0 * double(tp) / double(2 * tp + fp + fn);
}

EvalReport build_report(const std::vector<volio::LabelMask>& pred_masks,
                        const std::vector<volio::LabelMask>& gt_masks) {
    if (pred_masks.size() != gt_masks.size())
        throw DataError("evaluation: pred/gt patient counts differ");
    if (pred_masks.empty()) throw DataError("evaluation: no patients");

    EvalReport report;
    report.n_patients = pred_masks.size();

    std::array<std::vector<double>, volio::kNumClasses> dice_lists;
    std::vector<double> lesion_list;
    for (std::size_t i = 0; i < pred_masks.size(); ++i) {
        const auto& pm = pred_masks[i];
        const auto& gm = gt_masks[i];
        if (pm.patient_id != gm.patient_id)
            throw DataError("evaluation: patient id mismatch at row " +
                            std::to_string(i));
        PatientEval pe;
        pe.patient_id = pm.patient_id;
        for (int c = 0; c < volio::kNumClasses; ++c) {
            pe.dice[c] = dice(pm, gm, volio::ClassCode(c));
            dice_lists[c].push_back(pe.dice[c]);
        }
        // lesion classes count toward the mean only when the pair contains them
        double sum = 0;
        int present = 0;
        for (int c : {int(volio::kGgo), int(volio::kHighOpacity)}) {
            bool in_pair = false;
            for (std::size_t v = 0; v < pm.labels.size() && !in_pair; ++v)
                in_pair = pm.labels[v] == c || gm.labels[v] == c;
            if (in_pair) {
                sum += pe.dice[c];
                ++present;
            }
        }
        pe.lesion_dice = present ? sum / present : 1.0;
        lesion_list.push_back(pe.lesion_dice);
        pe.pred = quant::quantify(pm);
        pe.truth = quant::quantify(gm);
        report.patients.push_back(std::move(pe));
    }

    for (int c = 0; c < volio::kNumClasses; ++c)
        report.dice_per_class[c] = stats::mean_sd(dice_lists[c]);
    report.lesion_dice = stats::mean_sd(lesion_list);

    for (std::size_t t = 0; t < kVolumeNames.size(); ++t) {
        std::vector<double> pred_v, true_v;
        for (const auto& pe : report.patients) {
            pred_v.push_back(volume_of(pe.pred, t));
            true_v.push_back(volume_of(pe.truth, t));
        }
        VolumeAgreement& va = report.volumes[t];
        for (std::size_t i = 0; i < pred_v.size(); ++i)
            va.scatter.emplace_back(true_v[i], pred_v[i]);
        try {
            va.spearman = stats::spearman(pred_v, true_v);
        } catch (const DataError&) {
        }
        try {
            va.bland_altman = stats::bland_altman(pred_v, true_v);
        } catch (const DataError&) {
        }
        try {
            va.wilcoxon_p = stats::wilcoxon_signed_rank(pred_v, true_v);
        } catch (const DataError&) {
        }
    }
    return report;
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "patient_id,dice_bg,dice_ggo,dice_high,dice_lesion,"
           "ggo_ml_pred,ggo_ml_true,high_ml_pred,high_ml_true,"
           "pneumonia_ml_pred,pneumonia_ml_true,burden_pct_pred,burden_pct_true\n";
    for (const auto& pe : report.patients) {
        out << pe.patient_id;
        for (int c = 0; c < volio::kNumClasses; ++c) out << ',' << fmt_double(pe.dice[c]);
        out << ',' << fmt_double(pe.lesion_dice);
        out << ',' << fmt_double(pe.pred.ggo_ml) << ',' << fmt_double(pe.truth.ggo_ml);
        out << ',' << fmt_double(pe.pred.high_opacity_ml) << ','
            << fmt_double(pe.truth.high_opacity_ml);
        out << ',' << fmt_double(pe.pred.total_pneumonia_ml) << ','
            << fmt_double(pe.truth.total_pneumonia_ml);
        out << ',' << (pe.pred.burden_pct ? fmt_double(*pe.pred.burden_pct) : "");
        out << ',' << (pe.truth.burden_pct ? fmt_double(*pe.truth.burden_pct) : "");
        out << '\n';
    }
}

void write_summary_json(const EvalReport& report, const std::filesystem::path& path) {
    json j;
    j["n_patients"] = report.n_patients;
    j["p_threshold"] = kPThreshold;
    j["dice"]["background"] = meansd_json(report.dice_per_class[volio::kBackground]);
    j["dice"]["ggo"] = meansd_json(report.dice_per_class[volio::kGgo]);
    j["dice"]["high_opacity"] = meansd_json(report.dice_per_class[volio::kHighOpacity]);
    j["dice"]["lesion"] = meansd_json(report.lesion_dice);
    for (std::size_t t = 0; t < kVolumeNames.size(); ++t) {
        const VolumeAgreement& va = report.volumes[t];
        json v;
        if (va.spearman) {
            v["spearman_rho"] = va.spearman->rho;
            v["spearman_p"] = va.spearman->p;
            v["spearman_significant"] = va.spearman->p < kPThreshold;
        } else {
            v["spearman_rho"] = nullptr;
            v["spearman_p"] = nullptr;
        }
        if (va.bland_altman) {
            v["bias"] = va.bland_altman->bias;
            v["loa_low"] = va.bland_altman->loa_low;
            v["loa_high"] = va.bland_altman->loa_high;
        } else {
            v["bias"] = nullptr;
        }
        if (va.wilcoxon_p) {
            v["wilcoxon_p"] = *va.wilcoxon_p;
            v["wilcoxon_significant"] = *va.wilcoxon_p < kPThreshold;
        } else {
            v["wilcoxon_p"] = nullptr;
        }
        j["volumes"][kVolumeNames[t]] = std::move(v);
    }
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

void write_ba_points_csv(const EvalReport& report, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "volume_type,mean,diff\n";
    for (std::size_t t = 0; t < kVolumeNames.size(); ++t) {
        if (!report.volumes[t].bland_altman) continue;
        for (const auto& [m, d] : report.volumes[t].bland_altman->points)
            out << kVolumeNames[t] << ',' << fmt_double(m) << ',' << fmt_double(d)
                << '\n';
    }
}

void write_scatter_points_csv(const EvalReport& report,
                              const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "volume_type,truth,predicted\n";
    for (std::size_t t = 0; t < kVolumeNames.size(); ++t)
        for (const auto& [x, y] : report.volumes[t].scatter)
            out << kVolumeNames[t] << ',' << fmt_double(x) << ',' << fmt_double(y)
                << '\n';
}

void write_scatter_svg(const EvalReport& report, const std::filesystem::path& path) {
    auto out = open_out(path);
    const int pw = 220, ph = 220, margin = 40;
    svg_header(out, int(kVolumeNames.size()) * (pw + margin) + margin, ph + 2 * margin);
    for (std::size_t t = 0; t < kVolumeNames.size(); ++t) {
        const auto& pts = report.volumes[t].scatter;
        if (pts.empty()) continue;
        double lo = pts[0].first, hi = pts[0].first;
        for (const auto& [x, y] : pts) {
            lo = std::min({lo, x, y});
            hi = std::max({hi, x, y});
        }
        expand_range(lo, hi);
        Panel p{double(margin + t * (pw + margin)), double(margin),
                double(pw), double(ph), lo, hi, lo, hi};
        svg_panel_frame(out, p, std::string(kVolumeNames[t]) + " (truth vs predicted)");
        out << "<line x1=\"" << p.px(lo) << "\" y1=\"" << p.py(lo) << "\" x2=\""
            << p.px(hi) << "\" y2=\"" << p.py(hi)
            << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
        for (const auto& [x, y] : pts)
            out << "<circle cx=\"" << p.px(x) << "\" cy=\"" << p.py(y)
                << "\" r=\"3\" fill=\"steelblue\"/>\n";
    }
    out << "</svg>\n";
}

void write_ba_svg(const EvalReport& report, const std::filesystem::path& path) {
    auto out = open_out(path);
    const int pw = 220, ph = 220, margin = 40;
    svg_header(out, int(kVolumeNames.size()) * (pw + margin) + margin, ph + 2 * margin);
    for (std::size_t t = 0; t < kVolumeNames.size(); ++t) {
        if (!report.volumes[t].bland_altman) continue;
        const auto& ba = *report.volumes[t].bland_altman;
        double xlo = ba.points[0].first, xhi = xlo;
        double ylo = ba.loa_low, yhi = ba.loa_high;
        for (const auto& [m, d] : ba.points) {
            xlo = std::min(xlo, m);
            xhi = std::max(xhi, m);
            ylo = std::min(ylo, d);
            yhi = std::max(yhi, d);
        }
        expand_range(xlo, xhi);
        expand_range(ylo, yhi);
        Panel p{double(margin + t * (pw + margin)), double(margin),
                double(pw), double(ph), xlo, xhi, ylo, yhi};
        svg_panel_frame(out, p, std::string(kVolumeNames[t]) + " (Bland-Altman)");
        for (double level : {ba.bias, ba.loa_low, ba.loa_high})
            out << "<line x1=\"" << p.px(xlo) << "\" y1=\"" << p.py(level)
                << "\" x2=\"" << p.px(xhi) << "\" y2=\"" << p.py(level)
                << "\" stroke=\"" << (level == ba.bias ? "black" : "gray")
                << "\" stroke-dasharray=\"4 3\"/>\n";
        for (const auto& [m, d] : ba.points)
            out << "<circle cx=\"" << p.px(m) << "\" cy=\"" << p.py(d)
                << "\" r=\"3\" fill=\"indianred\"/>\n";
    }
    out << "</svg>\n";
}

}  // namespace lungquant::eval
