#pragma once
// Everything: the library proper plus the stage driver.

#include "srpl/error.hpp"
#include "srpl/image.hpp"
#include "srpl/pgm.hpp"
#include "srpl/srt.hpp"
#include "srpl/parallel.hpp"
#include "srpl/golden_section.hpp"
#include "srpl/t3ie.hpp"
#include "srpl/segmenter.hpp"
#include "srpl/cmso.hpp"
#include "srpl/loss.hpp"
#include "srpl/adam.hpp"
#include "srpl/features.hpp"
#include "srpl/model.hpp"
#include "srpl/metrics.hpp"
#include "srpl/synth.hpp"
#include "srpl/train.hpp"
#include "srpl/protocol.hpp"
#include "srpl/subprocess.hpp"
#include "srpl/external.hpp"
#include "srpl/pipeline.hpp"
