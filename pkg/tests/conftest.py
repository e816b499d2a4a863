import hypothesis

# Property suites run alongside socket-heavy integration tests; a wall
# clock deadline would make them flaky under load.
hypothesis.settings.register_profile(
    "websift", deadline=None, derandomize=True,
    suppress_health_check=[hypothesis.HealthCheck.too_slow],
)
hypothesis.settings.load_profile("websift")
