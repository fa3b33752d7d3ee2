"""Software twin of a switched-array mmWave channel sounder.

Generates the multitone sounding waveform and switching schedule, synthesizes
time-variant double-directional channels, simulates acquisition through the
receive chain, and recovers multipath parameters with an iterative
maximum-likelihood estimator.
"""

from .waveform import (ToneGrid, SoundingWaveform, gen_multitone, papr_db,
                       spectrum_flatness_db, quadratic_phases, extend_cyclic,
                       save_waveform, load_waveform)
from .schedule import (FrameSpec, SwitchCodebook, SwitchSchedule, build_frame,
                       gen_codebook, snapshot_timing, max_unambiguous_doppler,
                       save_schedule, load_schedule)
from .arrays import (ArrayGeometry, PatternGrid, Eadf, synth_pattern,
                     compute_eadf, desk_eadf, save_calibration,
                     load_calibration, save_eadf_cache, load_eadf_cache)
from .channel import (SpecularPath, AngularSpread, DenseProfile, Motion,
                      ChannelScene, specular_response, freq_psd,
                      delay_power_profile, dense_covariance, DenseCovariance,
                      realize_snapshot, scene_to_json, scene_from_json)
from .sounder import (LinkBudget, NoiseSpec, CirTensor, receiver_sensitivity,
                      link_budget_report, acquire, pdp, pas, save_cir,
                      load_cir, pdp_to_csv, pas_to_csv)
from .estimation import (AmbiguityFunction, doppler_ambiguity, PathEstimate,
                         EstimationResult, EstimatorConfig, estimate_specular,
                         estimate_dense, residual_cir, track_aoa,
                         tracks_to_csv, result_to_json)

__version__ = "0.1.0"
