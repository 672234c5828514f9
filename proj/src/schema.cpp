#include "pvatlas/schema.hpp"

#include <cmath>

#include "pvatlas/core/error.hpp"

namespace pvatlas {

std::string_view wire_string(LocationClass location) {
  switch (location) {
    case LocationClass::Left: return "left";
    case LocationClass::Right: return "right";
    case LocationClass::Bottom: return "bottom";
    case LocationClass::Top: return "top";
    case LocationClass::TopLeft: return "top-left";
    case LocationClass::TopRight: return "top-right";
    case LocationClass::BottomRight: return "bottom-right";
    case LocationClass::BottomLeft: return "bottom-left";
    case LocationClass::Center: return "center";
    case LocationClass::NA: return "NA";
  }
  return "NA";
}

std::string_view wire_string(QuantityBin quantity) {
  switch (quantity) {
    case QuantityBin::ZeroToOne: return "0 to 1";
    case QuantityBin::OneToFive: return "1 to 5";
    case QuantityBin::FiveToTen: return "5 to 10";
    case QuantityBin::TenPlus: return "10 to inf";
    case QuantityBin::NA: return "NA";
  }
  return "NA";
}

std::optional<LocationClass> location_from_wire(std::string_view text) {
  for (auto l : kLocationClasses) {
    if (wire_string(l) == text) return l;
  }
  return std::nullopt;
}

std::optional<QuantityBin> quantity_from_wire(std::string_view text) {
  for (auto q : kQuantityBins) {
    if (wire_string(q) == text) return q;
  }
  return std::nullopt;
}

QuantityBin quantity_bin_for_count(double count) {
  if (std::isnan(count) || count <= 0.0) return QuantityBin::NA;
  if (count <= 1.0) return QuantityBin::ZeroToOne;
  if (count <= 5.0) return QuantityBin::OneToFive;
  if (count <= 10.0) return QuantityBin::FiveToTen;
  return QuantityBin::TenPlus;
}

const TileLabel& validate_label(const TileLabel& label) {
  const bool loc_na = label.location == LocationClass::NA;
  const bool qty_na = label.quantity == QuantityBin::NA;
  if (label.present == loc_na || label.present == qty_na) {
    throw Error(ErrorCode::InconsistentLabel,
                "tile '" + label.tile_id + "': present=" + (label.present ? "true" : "false") +
                    " with location=" + std::string(wire_string(label.location)) +
                    ", quantity=" + std::string(wire_string(label.quantity)) +
                    " (presence requires both non-NA; absence requires both NA)");
  }
  return label;
}

}  // namespace pvatlas
