#pragma once

#include <stdexcept>
#include <string>

namespace circuitlab {

// Every error raised by the library derives from Error so callers (the CLI,
// the HTTP service) can report them uniformly.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CIRCUITLAB_DEFINE_ERROR(Name)      \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

CIRCUITLAB_DEFINE_ERROR(ConfigError);
CIRCUITLAB_DEFINE_ERROR(EncodingError);
CIRCUITLAB_DEFINE_ERROR(GenerationError);
CIRCUITLAB_DEFINE_ERROR(UnsolvableEpisodeError);
CIRCUITLAB_DEFINE_ERROR(BoundsError);
CIRCUITLAB_DEFINE_ERROR(NodeError);
CIRCUITLAB_DEFINE_ERROR(PatchError);
CIRCUITLAB_DEFINE_ERROR(StatsError);
CIRCUITLAB_DEFINE_ERROR(SpecError);
CIRCUITLAB_DEFINE_ERROR(DegenerateBatchError);
CIRCUITLAB_DEFINE_ERROR(TrainingDiverged);
CIRCUITLAB_DEFINE_ERROR(CheckpointError);
CIRCUITLAB_DEFINE_ERROR(ScoreError);
CIRCUITLAB_DEFINE_ERROR(EmptyPopulationError);

#undef CIRCUITLAB_DEFINE_ERROR

}  // namespace circuitlab
