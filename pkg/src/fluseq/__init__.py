"""fluseq: weekly influenza-prevalence forecasting with a from-scratch
seq2seq-with-attention model, trained through an in-package reverse-mode
autodiff tape backed by compiled (or numpy fallback) LSTM kernels."""

__version__ = "0.1.0"
