"""Competency estimation, counterfactual image generation, and explanations.

The package is organized around a single workflow:

1. ``models``        -- train a small CNN classifier (with an exposed feature
                        extractor) and a convolutional autoencoder.
2. ``competency``    -- score images with a calibrated competency estimate
                        (max softmax probability times the probability that
                        the image is in-distribution).
3. ``perturb``       -- synthesize a labeled corpus of low-competency images
                        from six degradation causes.
4. ``counterfactuals`` -- five generators that turn a low-competency image
                        into a similar high-competency one.
5. ``metrics``       -- evaluate generated counterfactuals (success rate,
                        perceptual loss, similarities, FID, KID, timing).
6. ``explain``       -- query a multimodal LLM endpoint for language
                        explanations, with and without counterfactual aid.
7. ``cli``           -- staged experiment pipeline with reproducible runs.
"""

__version__ = "0.1.0"
