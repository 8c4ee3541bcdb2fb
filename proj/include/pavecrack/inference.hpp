#pragma once

// Full-frame crack detection by tiling.

#include <ostream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "pavecrack/dataset.hpp"
#include "pavecrack/model_zoo.hpp"

namespace pavecrack {

struct TileCell {
    float probability = 0.0f;
    Label label = Label::Negative;
};

struct TileGrid {
    GridSpec grid;
    /// Row-major, rows x cols.
    std::vector<TileCell> cells;
    double threshold = 0.5;
    int frame_width = 0;
    int frame_height = 0;
    std::string frame_id;
    std::string model_id;

    const TileCell& at(int row, int col) const { return cells.at(static_cast<std::size_t>(row * grid.cols + col)); }
    std::size_t positive_count() const;
};

/// Every cell is classified independently; label is positive iff probability >= threshold.
TileGrid classify_frame(const cv::Mat& frame, const PatchClassifier& model, const GridSpec& grid,
                        double threshold = 0.5, const std::string& frame_id = {}, const std::string& model_id = {});

struct DetectionRecord {
    std::string frame_id;
    int row = 0;
    int col = 0;
    int x = 0;
    int y = 0;
    int size = 0;
    float probability = 0.0f;
    Label label = Label::Negative;
};

/// One record per cell.
std::vector<DetectionRecord> detection_records(const TileGrid& tiles);

struct Overlay {
    cv::Mat image;
    /// Positive cells only.
    std::vector<DetectionRecord> detections;
};

/// Outlines each positive cell and prints its probability inside the outline. Pixels outside
/// positive cells are untouched. Throws ShapeError when the frame does not match the grid.
Overlay render_overlay(const cv::Mat& frame, const TileGrid& tiles);

/// One JSON object per line.
std::string to_json_line(const DetectionRecord& record);
void write_ndjson(const std::vector<DetectionRecord>& records, std::ostream& out);

}  // namespace pavecrack
