"""Battery dispatch under market power: welfare vs. profit maximisation."""
