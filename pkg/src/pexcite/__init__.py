"""Analytic excitation design and PE verification for online policy iteration.

Modules: ``trig`` (exact sinusoid-sum algebra), ``conditions`` (excluding
frequency conditions), ``design`` (frequency selection, flat feed-forward,
rank certificate), ``sim`` (two-player game simulator), ``verify``
(eigenvalue-signal PE checks) and ``cli``.
"""

__version__ = "0.1.0"
