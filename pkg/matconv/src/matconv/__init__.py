"""matconv: Ninapro .mat to EMGB dataset converter."""

from .convert import (ConvertError, MatRecordingView, convert,
                      read_recording, segment_windows, standardize,
                      write_emgb)

__version__ = "0.1.0"
