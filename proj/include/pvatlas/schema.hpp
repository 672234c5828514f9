#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "pvatlas/core/clock.hpp"

namespace pvatlas {

/// Where panels sit within a tile: one of nine cells, or NA when absent.
enum class LocationClass { Left, Right, Bottom, Top, TopLeft, TopRight, BottomRight, BottomLeft, Center, NA };

/// Panel-count bins over (0,1], (1,5], (5,10], (10,inf), or NA when absent.
enum class QuantityBin { ZeroToOne, OneToFive, FiveToTen, TenPlus, NA };

// Vocabulary order matches the prompt's value lists.
inline constexpr std::array kLocationClasses = {
    LocationClass::Left,     LocationClass::Right,       LocationClass::Bottom,
    LocationClass::Top,      LocationClass::TopLeft,     LocationClass::TopRight,
    LocationClass::BottomRight, LocationClass::BottomLeft, LocationClass::Center,
    LocationClass::NA};

inline constexpr std::array kQuantityBins = {QuantityBin::ZeroToOne, QuantityBin::OneToFive,
                                             QuantityBin::FiveToTen, QuantityBin::TenPlus,
                                             QuantityBin::NA};

std::string_view wire_string(LocationClass location);
std::string_view wire_string(QuantityBin quantity);

/// Exact (byte-for-byte) vocabulary lookup.
std::optional<LocationClass> location_from_wire(std::string_view text);
std::optional<QuantityBin> quantity_from_wire(std::string_view text);

/// Bin for a panel count; counts <= 0 (or NaN) have no bin and map to NA.
QuantityBin quantity_bin_for_count(double count);

/// Ground-truth label of one tile. Likelihood and confidence are model
/// outputs and are deliberately absent here.
struct TileLabel {
  std::string tile_id;
  bool present = false;
  LocationClass location = LocationClass::NA;
  QuantityBin quantity = QuantityBin::NA;
  std::string annotator_id;
  Timestamp labeled_at{};

  friend bool operator==(const TileLabel&, const TileLabel&) = default;
};

/// Checks the presence/NA coupling: absent <=> location NA <=> quantity NA.
/// Returns the label unchanged; throws Error{InconsistentLabel}.
const TileLabel& validate_label(const TileLabel& label);

}  // namespace pvatlas
