# Route blueprints
