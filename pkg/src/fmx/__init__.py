"""Variational autoencoder with a factorial Gaussian-mixture prior.

Modules: expfam (Normal-Gamma and Dirichlet algebra), prior (mixture state,
E-step, natural-gradient M-step, sampling), nets (MLP encoder/decoder),
elbo (training, semi-supervised and predictive bounds), trainer (optimization
loop), data (synthetic generator, binary containers, labels), cli (``fmx``).
"""
