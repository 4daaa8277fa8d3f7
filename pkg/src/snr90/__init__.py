"""Per-token speech intelligibility thresholds (SNR90): simulated adaptive
listening experiments, speech-weighted noise, label-propagated distortion
continua, log-spectrum features, and a from-scratch CNN regressor with a
mock-ASR baseline.
"""

from .audio import (AudioClip, SegmentAnnotation, TokenLabel, read_wav,
                    write_wav, rms)
from .errors import (AnnotationError, AudioFormatError, DataError, GridError,
                     NoF0Error, NoThresholdError, TrainingDivergedError)
from .noise import (DEFAULT_SNR_LADDER, LtassProfile, SnrLadder,
                    estimate_ltass, measure_snr, mix_at_snr, synth_noise)
from .psychometrics import (ResponseCurve, SimulatedListener, Snr90Estimate,
                            TrialRecord, average_curve, measure_snr90,
                            snr90_from_curve, staircase_session)
from .augment import (ContinuumEntry, ContinuumGate, DistortionSpec,
                      apply_fir, augment_corpus, build_continuum, estimate_f0,
                      pitch_shift, stretch_consonant)
from .features import FeatureMatrix, extract_features
from .cnn import (CnnArchitecture, CnnModel, DataSplit, TokenExample,
                  TrainConfig, evaluate, forward, init_model, load_model,
                  save_model, split_by_talker, train)
from .baseline import (BaselineResult, MockAsrBackend, asr_snr90,
                       bias_variance, transcript_matches)

__version__ = "0.1.0"
