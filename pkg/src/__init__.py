"""GradInit: learned initialization scales on a tape-based numpy autodiff."""

__version__ = "0.3.0"
