fn main() -> std::process::ExitCode {
    latent_wm::cli::run()
}
