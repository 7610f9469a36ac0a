"""specdesk: a desk-scale speculative decoding lab.

Train a tiny byte-level transformer target, distill it, train draft layers
under three regimes (teacher-forced single draft, multi-step self-feature
single draft, and position specialists), then benchmark acceptance length,
position-wise acceptance and phase timings against vanilla decoding.
"""

__version__ = "0.1.0"
