"""Published (precision, recall, F1, VIRR) per algorithm and platform, two-decimal rounded."""

REFERENCE_SCORES = {
    ("risky_ce_pattern", "purley"): (0.53, 0.46, 0.49, 0.37),
    ("random_forest", "purley"): (0.61, 0.62, 0.61, 0.52),
    ("random_forest", "whitley"): (0.34, 0.46, 0.39, 0.32),
    ("random_forest", "k920"): (0.44, 0.51, 0.47, 0.39),
    ("lightgbm", "purley"): (0.54, 0.80, 0.64, 0.65),
    ("lightgbm", "whitley"): (0.46, 0.54, 0.49, 0.45),
    ("lightgbm", "k920"): (0.51, 0.57, 0.54, 0.46),
    ("ft_transformer", "purley"): (0.49, 0.74, 0.59, 0.58),
    ("ft_transformer", "whitley"): (0.53, 0.49, 0.50, 0.40),
    ("ft_transformer", "k920"): (0.40, 0.54, 0.46, 0.41),
}
