#include "pavecrack/inference.hpp"

#include <algorithm>
#include <cstdio>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "pavecrack/errors.hpp"

namespace pavecrack {

std::size_t TileGrid::positive_count() const {
    return static_cast<std::size_t>(
        std::count_if(cells.begin(), cells.end(), [](const TileCell& c) { return c.label == Label::Positive; }));
}

TileGrid classify_frame(const cv::Mat& frame, const PatchClassifier& model, const GridSpec& grid, double threshold,
                        const std::string& frame_id, const std::string& model_id) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw DomainError("threshold must lie in [0, 1]");
    const auto patches = extract_patches(frame, grid, frame_id);
    const auto probabilities = model.predict_probabilities(patches);
    if (probabilities.size() != patches.size()) throw ShapeError("classifier returned the wrong number of outputs");

    TileGrid tiles;
    tiles.grid = grid;
    tiles.threshold = threshold;
    tiles.frame_width = frame.cols;
    tiles.frame_height = frame.rows;
    tiles.frame_id = frame_id;
    tiles.model_id = model_id;
    for (const float p : probabilities) {
        tiles.cells.push_back({p, p >= threshold ? Label::Positive : Label::Negative});
    }
    return tiles;
}

std::vector<DetectionRecord> detection_records(const TileGrid& tiles) {
    std::vector<DetectionRecord> out;
    for (int r = 0; r < tiles.grid.rows; ++r) {
        for (int c = 0; c < tiles.grid.cols; ++c) {
            const cv::Rect cell = tiles.grid.cell(r, c);
            const TileCell& t = tiles.at(r, c);
            out.push_back({tiles.frame_id, r, c, cell.x, cell.y, cell.width, t.probability, t.label});
        }
    }
    return out;
}

Overlay render_overlay(const cv::Mat& frame, const TileGrid& tiles) {
    if (frame.cols != tiles.frame_width || frame.rows != tiles.frame_height) {
        throw ShapeError("frame is " + std::to_string(frame.cols) + "x" + std::to_string(frame.rows) +
                         " but tiles were computed for " + std::to_string(tiles.frame_width) + "x" +
                         std::to_string(tiles.frame_height));
    }
    if (tiles.cells.size() != static_cast<std::size_t>(tiles.grid.count())) {
        throw ShapeError("tile grid has " + std::to_string(tiles.cells.size()) + " cells, expected " +
                         std::to_string(tiles.grid.count()));
    }
    try {
        tiles.grid.check_fits(frame.cols, frame.rows, false);
    } catch (const Error& e) {
        throw ShapeError(e.what());
    }

    Overlay out;
    out.image = frame.clone();
    const cv::Scalar outline = frame.channels() == 3 ? cv::Scalar(255, 32, 32) : cv::Scalar(255);
    const cv::Scalar text_color = frame.channels() == 3 ? cv::Scalar(255, 255, 0) : cv::Scalar(255);
    for (const auto& d : detection_records(tiles)) {
        if (d.label != Label::Positive) continue;
        const cv::Rect cell(d.x, d.y, d.size, d.size);
        // Everything is drawn through a view of the cell so nothing spills outside it.
        cv::Mat view = out.image(cell);
        const int thickness = std::max(1, d.size / 50);
        cv::rectangle(view, cv::Rect(0, 0, d.size, d.size), outline, thickness, cv::LINE_8);
        char text[16];
        std::snprintf(text, sizeof text, "%.2f", d.probability);
        const double scale = std::max(0.3, d.size / 200.0 * 0.8);
        cv::putText(view, text, {thickness + 4, thickness + static_cast<int>(24 * scale) + 4},
                    cv::FONT_HERSHEY_SIMPLEX, scale, text_color, std::max(1, thickness / 2), cv::LINE_AA);
        out.detections.push_back(d);
    }
    return out;
}

std::string to_json_line(const DetectionRecord& d) {
    const nlohmann::json j{{"frame_id", d.frame_id}, {"row", d.row},   {"col", d.col},
                           {"x", d.x},               {"y", d.y},       {"size", d.size},
                           {"probability", d.probability},
                           {"label", d.label == Label::Positive ? "positive" : "negative"}};
    return j.dump();
}

void write_ndjson(const std::vector<DetectionRecord>& records, std::ostream& out) {
    for (const auto& r : records) out << to_json_line(r) << '\n';
}

}  // namespace pavecrack
