#pragma once

#include <string>
#include <vector>

namespace mfd {

// One sound event occurrence in a clip, in seconds.
struct Event {
  double onset = 0.0;
  double offset = 0.0;
  std::string label;
};

using EventList = std::vector<Event>;

}  // namespace mfd
