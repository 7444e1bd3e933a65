"""Full-order models and dataset generation."""

from .adr import ADRConfig, ADRSolution, solve_adr
from .aliev_panfilov import APConfig, Stimulus, make_stimulus, solve_aliev_panfilov
from .dataset import Dataset, Sample, build_dataset, read_dataset, thin_points, write_dataset
from .gp import GPConfig, sample_bounded_frequency, sample_gp
