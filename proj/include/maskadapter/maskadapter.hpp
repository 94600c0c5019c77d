#pragma once

#include "maskadapter/adapter.hpp"
#include "maskadapter/common.hpp"
#include "maskadapter/extractors.hpp"
#include "maskadapter/io.hpp"
#include "maskadapter/losses.hpp"
#include "maskadapter/masks.hpp"
#include "maskadapter/matching.hpp"
#include "maskadapter/pipeline.hpp"
#include "maskadapter/synthworld.hpp"
