from doob_lab import __version__

__doc__ = """
The doob_lab package is a laboratory for conditional sampling with
denoising diffusion models on analytic toy distributions.  Every
conditioning scheme (exact Doob's h-transform, reconstruction guidance,
replacement, RePaint, RFDiffusion-style, amortised and finetuned
h-transforms) can be scored against closed-form ground-truth posteriors.

Version: """ + __version__.version

__all__ = [
    'cli',
    'conditioning',
    'engine',
    'eval',
    'nets',
    'oracle',
    'schedule',
]
