# Acceptance tests package
